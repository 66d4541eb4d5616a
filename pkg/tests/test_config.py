import json

import pytest

from grouprobust import config as K


def base(**extra):
    raw = {"output_dir": "out", "dataset": {"kind": "synthetic"}}
    raw.update(extra)
    return raw


def pointer_of(raw):
    with pytest.raises(K.ConfigError) as info:
        K.validate(raw)
    return info.value.pointer


def test_defaults_filled():
    cfg = K.validate(base())
    assert cfg["dataset"]["class_count"] == 10
    assert cfg["budget"] == {"norm": "linf", "epsilon": 0.1}
    assert cfg["strategies"] is None and cfg["families"] == []


def test_section_defaults_merge():
    cfg = K.validate(base(strategies={"sources": [0], "targets": [1, 2], "k": [2]},
                          defense={"sources": [0], "targets": [3], "epochs": 1}))
    assert cfg["strategies"]["campaigns"] == 20 and cfg["strategies"]["k"] == [2]
    assert cfg["defense"]["epochs"] == 1 and cfg["defense"]["slack"] == 0.02


@pytest.mark.parametrize("raw, pointer", [
    ({"dataset": {"kind": "synthetic"}}, "/"),
    (base(trials=0), "/trials"),
    (base(dataset={"kind": "parquet"}), "/dataset/kind"),
    (base(dataset={"kind": "csv"}), "/dataset"),
    (base(budget={"norm": "l1", "epsilon": 0.1}), "/budget/norm"),
    (base(budget={"norm": "linf", "epsilon": -1}), "/budget/epsilon"),
    (base(model={"seeds": [1, 1]}), "/model/seeds"),
    (base(extra=1), "/"),
    (base(dataset={"kind": "synthetic", "split": [0.5, 0.2, 0.1]}), "/dataset/split"),
    (base(families=[{"kind": "source_to_targets", "sources": [0, 1], "targets": [1, 2]}]), "/families/0/targets"),
    (base(families=[{"kind": "surjective", "sources": [0], "targets": [1, 2], "k": 3}]), "/families/0/k"),
    (base(families=[{"kind": "surjective", "sources": [0], "targets": [1, 2], "k": 1, "managers": [3]}]),
     "/families/0/managers"),
    (base(families=[{"kind": "source_to_targets", "sources": [0], "targets": [12]}]), "/families/0/targets/0"),
    (base(families=[{"kind": "untargeted", "name": "a"}, {"kind": "untargeted", "name": "a"}]), "/families"),
    (base(strategies={"sources": [0], "targets": [1, 2], "k": [1, 3]}), "/strategies/k/1"),
    (base(defense={"sources": [0, 3], "targets": [3]}), "/defense/targets"),
])
def test_invalid_configs_report_pointer(raw, pointer):
    assert pointer_of(raw) == pointer


def test_load_errors(tmp_path):
    with pytest.raises(K.ConfigError, match="not found"):
        K.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\"output_dir\": ")
    with pytest.raises(K.ConfigError, match="line 1"):
        K.load(bad)


def test_hash_is_canonical():
    a = K.validate(base(trials=5, seed=2))
    b = K.validate(json.loads(json.dumps(base(seed=2, trials=5))))
    assert K.config_hash(a) == K.config_hash(b)
    assert len(K.config_hash(a)) == 16
    assert K.config_hash(a) != K.config_hash(K.validate(base(trials=6, seed=2)))
