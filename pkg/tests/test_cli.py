import io
import json

import numpy as np
import pytest

from moeisr.cli import main
from moeisr.data import load_image, save_image
from moeisr.flops import read_expert_map
from moeisr.models import load_checkpoint

TOY = {"feat_dim": 4, "n_res_blocks": 1, "mapper_layers": 2, "mapper_hidden": 4, "expert_hidden": 8,
       "patch": 8, "scale_min": 1.0, "scale_max": 2.0, "n_queries": 64, "steps": 3, "log_every": 1}


def run(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    data.mkdir()
    r = np.random.default_rng(5)
    for i in range(2):
        save_image(data / f"img{i}.ppm", r.random((20, 18, 3)))
    (root / "toy.json").write_text(json.dumps(TOY))
    code, log = run("train", "--config", str(root / "toy.json"), "--dataset", str(data),
                    "--checkpoint", str(root / "m.ck"))
    assert code == 0, log
    return root


def test_train_echoes_config_and_metrics(workspace):
    code, log = run("train", "--config", str(workspace / "toy.json"), "--seed", "7", "--dataset",
                    str(workspace / "data"), "--checkpoint", str(workspace / "s7.ck"))
    assert code == 0
    assert "config seed 7" in log and "config alpha 3000.0" in log
    assert any(line.startswith("step 0 loss ") for line in log.splitlines())


def test_train_twice_byte_identical(workspace):
    paths = []
    for name in ("a.ck", "b.ck"):
        code, _ = run("train", "--config", str(workspace / "toy.json"), "--seed", "7",
                      "--dataset", str(workspace / "data"), "--checkpoint", str(workspace / name))
        assert code == 0
        paths.append((workspace / name).read_bytes())
    assert paths[0] == paths[1]


def test_unknown_config_key_exit_2(workspace, capsys):
    bad = workspace / "bad.json"
    bad.write_text(json.dumps({**TOY, "learning_rate": 0.1}))
    code, _ = run("train", "--config", str(bad), "--dataset", str(workspace / "data"),
                  "--checkpoint", str(workspace / "x.ck"))
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_set_override_and_bad_key(workspace, capsys):
    code, log = run("train", "--config", str(workspace / "toy.json"), "--set", "steps=1", "--set", "lr=0.01",
                    "--dataset", str(workspace / "data"), "--checkpoint", str(workspace / "o.ck"))
    assert code == 0 and "config steps 1" in log and "config lr 0.01" in log
    code, _ = run("train", "--config", str(workspace / "toy.json"), "--set", "nope=1",
                  "--dataset", str(workspace / "data"), "--checkpoint", str(workspace / "o.ck"))
    assert code == 2 and "nope" in capsys.readouterr().err


def test_variant_s_sets_hidden_128(workspace):
    cfg = {k: v for k, v in TOY.items() if k != "expert_hidden"}
    cfg["steps"] = 1
    (workspace / "s.json").write_text(json.dumps(cfg))
    code, _ = run("train", "--config", str(workspace / "s.json"), "--variant", "s",
                  "--dataset", str(workspace / "data"), "--checkpoint", str(workspace / "var.ck"))
    assert code == 0
    m = load_checkpoint(workspace / "var.ck")
    assert {e.hidden for e in m.experts} == {128}
    assert [e.depth for e in m.experts] == [2, 3, 4, 5]


def test_weights_flag(workspace):
    code, log = run("train", "--config", str(workspace / "toy.json"), "--weights", "1,1,1,2", "--tau", "3",
                    "--steps", "1", "--dataset", str(workspace / "data"), "--checkpoint", str(workspace / "w.ck"))
    assert code == 0
    assert "config weights [1.0, 1.0, 1.0, 2.0]" in log and "config tau 3.0" in log


def test_weights_wrong_length_is_config_error(workspace):
    code, _ = run("train", "--config", str(workspace / "toy.json"), "--weights", "1,2",
                  "--dataset", str(workspace / "data"), "--checkpoint", str(workspace / "w.ck"))
    assert code == 2


def test_missing_dataset_exit_1(workspace):
    code, _ = run("train", "--config", str(workspace / "toy.json"), "--dataset", str(workspace / "nope"),
                  "--checkpoint", str(workspace / "w.ck"))
    assert code == 1


def test_infer_non_integer_scale(workspace):
    lr = workspace / "lr.ppm"
    save_image(lr, np.random.default_rng(1).random((10, 10, 3)))
    out = workspace / "sr.ppm"
    code, log = run("infer", "--checkpoint", str(workspace / "m.ck"), "--input", str(lr), "--scale", "3.3",
                    "--out", str(out))
    assert code == 0
    assert load_image(out).shape == (33, 33, 3)
    dec = read_expert_map(workspace / "sr_experts.ppm")
    assert dec.shape == (33, 33)
    shares = [float(v) for v in log.split("shares ")[1].split(",")]
    assert abs(sum(shares) - 1.0) < 1e-3
    counts = np.bincount(dec.ravel(), minlength=4)
    assert counts.sum() == 33 * 33


def test_infer_out_size(workspace):
    lr = workspace / "lr2.ppm"
    save_image(lr, np.random.default_rng(2).random((8, 6, 3)))
    code, _ = run("infer", "--checkpoint", str(workspace / "m.ck"), "--input", str(lr), "--out-size", "17x9",
                  "--out", str(workspace / "o.ppm"), "--map-out", str(workspace / "o_map.ppm"))
    assert code == 0
    assert load_image(workspace / "o.ppm").shape == (17, 9, 3)
    assert read_expert_map(workspace / "o_map.ppm").shape == (17, 9)


def test_infer_missing_checkpoint_exit_1(workspace):
    code, _ = run("infer", "--checkpoint", str(workspace / "missing.ck"), "--input", "x.ppm", "--scale", "2",
                  "--out", str(workspace / "o.ppm"))
    assert code == 1


def test_eval_tsv_many_scales(workspace):
    code, out = run("eval", "--checkpoint", str(workspace / "m.ck"), "--dataset", str(workspace / "data"),
                    "--scale", "2,3,4,6,8")
    assert code == 0
    rows = [line.split("\t") for line in out.strip().splitlines()]
    assert rows[0] == ["scale", "psnr", "flops_ratio"]
    assert [r[0] for r in rows[1:]] == ["2", "3", "4", "6", "8"]
    for r in rows[1:]:
        assert float(r[1]) > 0 and 0 < float(r[2]) <= 1


def test_eval_empty_dataset_exit_1(workspace, tmp_path, capsys):
    code, _ = run("eval", "--checkpoint", str(workspace / "m.ck"), "--dataset", str(tmp_path))
    assert code == 1
    assert "no images" in capsys.readouterr().err


def test_profile_report(workspace):
    lr = workspace / "lr3.ppm"
    save_image(lr, np.random.default_rng(3).random((6, 6, 3)))
    code, out = run("profile", "--checkpoint", str(workspace / "m.ck"), "--input", str(lr), "--out-size", "24x24")
    assert code == 0
    report = dict(line.split(": ", 1) for line in out.strip().splitlines())
    assert int(report["pipeline_total"]) == (int(report["encoder_flops"]) + int(report["mapper_flops"])
                                             + int(report["unfold_flops"]) + int(report["decoder_total"]))
    assert sum(int(v) for v in report["pixels_per_expert"].split(",")) == 24 * 24
    assert 0 < float(report["ratio"]) <= 1


def test_bad_subcommand_exit_2():
    assert run("fly")[0] == 2
