import json
import shutil
import xml.etree.ElementTree as ET

import pytest

from grouprobust import cli
from grouprobust.config import config_hash, load

ORDER = ("gen-data", "train", "attack-eval", "metrics", "strategies", "defend", "report")
CSVS = ("train_log.csv", "attack_eval.csv", "metrics.csv", "pearson.csv", "strategies.csv", "kappa_search.csv",
        "defense.csv")
SVGS = ("metrics.svg", "attack_eval.svg", "strategies.svg", "defense.svg")


def small_config(out, seeds=(1, 2)):
    return {
        "output_dir": str(out), "trials": 10, "seed": 1,
        "dataset": {"kind": "synthetic", "class_count": 6, "dim": 4, "per_class": 30, "spread": 0.03},
        "model": {"hidden": [16], "epochs": 15, "seeds": list(seeds)},
        "attack": {"iterations": 10},
        "families": [{"kind": "source_to_targets", "sources": [0, 1, 2], "targets": [3, 4, 5], "name": "s2t"},
                     {"kind": "surjective", "sources": [0, 1], "targets": [3, 4, 5], "k": 2, "name": "surj"}],
        "strategies": {"sources": [0, 1, 2], "targets": [3, 4, 5], "k": [1, 2], "campaigns": 3, "random_repeats": 2},
        "defense": {"sources": [0, 1, 2], "targets": [3, 4, 5], "kappas": [0.3, 1.0], "epochs": 1,
                    "search_trials": 10, "slack": 0.1},
    }


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def run_all(cfg_path):
    return [cli.main([cmd, "--config", cfg_path]) for cmd in ORDER]


def snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "out"
    path = write_config(root / "cfg.json", small_config(out))
    codes = run_all(path)
    return root, out, path, codes


def test_every_command_succeeds(finished):
    _, out, _, codes = finished
    assert codes == [0] * len(ORDER)
    for name in CSVS + SVGS + ("transcript.jsonl", "defended.grmlp", "baseline_at.grmlp", "recipe.json"):
        assert (out / name).exists(), name


def test_headers_carry_config_hash(finished):
    _, out, path, _ = finished
    h = config_hash(load(path))
    for name in CSVS:
        assert (out / name).read_text().splitlines()[0] == f"# config_hash: {h}"
    for name in SVGS:
        assert h in (out / name).read_text()
    assert json.loads((out / "defense.json").read_text())["config_hash"] == h


def test_svgs_parse(finished):
    _, out, _, _ = finished
    for name in SVGS:
        root = ET.parse(out / name).getroot()
        assert root.tag.endswith("svg")


def test_replay_matches_disk(finished):
    _, out, _, _ = finished
    rendered = cli.replay(out)
    assert set(rendered) == set(CSVS)
    for name, text in rendered.items():
        assert (out / name).read_text() == text


def test_rerun_is_byte_identical(finished):
    root, out, path, _ = finished
    before = snapshot(out)
    fresh = root / "again"
    shutil.copytree(out, fresh)
    shutil.rmtree(out)
    assert run_all(path) == [0] * len(ORDER)
    assert snapshot(out) == before
    shutil.rmtree(fresh)


def test_single_seed_notice(tmp_path, capsys):
    path = write_config(tmp_path / "cfg.json", small_config(tmp_path / "out", seeds=(1,)))
    assert cli.main(["metrics", "--config", path]) == 0
    assert "insufficient ensemble" in capsys.readouterr().err
    assert "insufficient ensemble" in (tmp_path / "out" / "pearson.csv").read_text()


def test_schema_error_exit_code(tmp_path, capsys):
    cfg = small_config(tmp_path / "out")
    cfg["budget"] = {"norm": "linf", "epsilon": "big"}
    assert cli.main(["train", "--config", write_config(tmp_path / "cfg.json", cfg)]) == 2
    assert "/budget/epsilon" in capsys.readouterr().err


def test_missing_section_exit_code(tmp_path, capsys):
    cfg = small_config(tmp_path / "out")
    del cfg["strategies"]
    assert cli.main(["strategies", "--config", write_config(tmp_path / "cfg.json", cfg)]) == 2
    assert "/strategies" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    cfg = small_config(tmp_path / "out")
    cfg["dataset"] = {"kind": "csv", "path": str(tmp_path / "nowhere.csv")}
    assert cli.main(["gen-data", "--config", write_config(tmp_path / "cfg.json", cfg)]) == 3
    assert "error" in capsys.readouterr().err


def test_csv_dataset_class_check(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("label,f0\n" + "".join(f"{i % 2},{0.1 + 0.8 * (i % 2)}\n" for i in range(30)))
    cfg = small_config(tmp_path / "out")
    cfg["dataset"] = {"kind": "csv", "path": str(tmp_path / "d.csv")}
    assert cli.main(["attack-eval", "--config", write_config(tmp_path / "cfg.json", cfg)]) == 2
    assert "/families/0/sources/2" in capsys.readouterr().err


def test_report_without_results(tmp_path):
    path = write_config(tmp_path / "cfg.json", small_config(tmp_path / "out"))
    assert cli.main(["report", "--config", path]) == 2


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["fly", "--config", "x.json"])
