"""Command-line driver: ``grouprobust <command> --config run.json``.

Every command derives all randomness from the config, writes its raw
per-trial records to ``transcript.jsonl`` and renders its CSV from those
records alone, so ``replay`` reproduces each CSV byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from grouprobust import classifier, config as config_mod, data as data_mod, svg
from grouprobust.attack import AttackConfig, AttackError, Budget
from grouprobust.classifier import ModelFormatError
from grouprobust.config import ConfigError, config_hash, family_name
from grouprobust.data import DatasetError, GroundTruth
from grouprobust.defense import (
    DefenseConfig,
    DefenseError,
    accuracy_on,
    evaluate_defense,
    search_kappa,
    train_adversarial_baseline,
    train_defense,
)
from grouprobust.experiment import (
    GoalError,
    GoalFamily,
    UndefinedCorrelation,
    average_guess_adversary,
    best_guess_adversary,
    candidate_targets,
    generate,
    group_adversary,
    metric_suite,
    pearson,
    run_experiment,
    trial_rng,
)
from grouprobust.strategies import STRATEGIES, estimate_prior, run_campaign

log = logging.getLogger("grouprobust")

COMMANDS = ("gen-data", "train", "attack-eval", "metrics", "strategies", "defend", "report")
ATTACKS = ("best_guess", "average_guess", "mdmax", "mdmul")
TRANSCRIPT = "transcript.jsonl"
EXIT_CONFIG, EXIT_RUNTIME = 2, 3
INSUFFICIENT = "insufficient ensemble"


# --- shared plumbing ------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def render_csv(chash: str, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash: {chash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def read_transcript(out: Path) -> list[dict]:
    path = out / TRANSCRIPT
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def write_transcript(out: Path, command: str, records: list[dict]) -> None:
    """Replace ``command``'s records, keeping other commands' in canonical order."""
    kept = [r for r in read_transcript(out) if r["command"] != command]
    merged = kept + [dict(r, command=command) for r in records]
    merged.sort(key=lambda r: COMMANDS.index(r["command"]))
    text = "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in merged)
    (out / TRANSCRIPT).write_text(text)


def records_for(records: list[dict], command: str) -> list[dict]:
    return [r for r in records if r["command"] == command]


class Run:
    """Materializes the config's dataset, ground truth and models."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self._data = None
        self.budget = Budget(cfg["budget"]["norm"], float(cfg["budget"]["epsilon"]))
        a = cfg["attack"]
        self.attack_cfg = AttackConfig(a["iterations"], a["step_size"], a["random_start"], a["seed"])

    def data(self):
        if self._data is None:
            ds = self.cfg["dataset"]
            if ds["kind"] == "synthetic":
                full, gt = data_mod.synth_clusters(ds["class_count"], ds["dim"], ds["per_class"], ds["spread"], ds["seed"])
            else:
                full = data_mod.load_csv(ds["path"])
                gt = GroundTruth.from_dataset(full, ds["stability_radius"])
            self._check_classes(full.class_count)
            train, test, val = data_mod.split(full, tuple(ds["split"]), ds["split_seed"])
            self._data = full, train, test, val, gt
        return self._data

    def _check_classes(self, n: int) -> None:
        # synthetic configs are checked at parse time; ingested data only now
        def check(values, pointer):
            for i, c in enumerate(values or ()):
                if c >= n:
                    raise ConfigError(f"{pointer}/{i}", f"class index {c} is not below class_count {n}")

        for i, fam in enumerate(self.cfg["families"]):
            for key in ("sources", "targets", "managers"):
                check(fam.get(key), f"/families/{i}/{key}")
        for sec in ("strategies", "defense"):
            if self.cfg[sec] is not None:
                for key in ("sources", "targets"):
                    check(self.cfg[sec][key], f"/{sec}/{key}")

    def families(self) -> list[GoalFamily]:
        n = self.data()[0].class_count
        out = []
        for i, f in enumerate(self.cfg["families"]):
            name = family_name(f, i)
            try:
                if f["kind"] == "untargeted":
                    fam = GoalFamily.untargeted(n, name=name)
                elif f["kind"] == "targeted":
                    fam = GoalFamily.targeted(n, target=f.get("target"), name=name)
                elif f["kind"] == "source_to_targets":
                    fam = GoalFamily.source_to_targets(n, f["sources"], targets=f["targets"], name=name)
                else:
                    fam = GoalFamily.surjective(n, f["sources"], f["targets"], f["k"], f.get("allow_reuse", True),
                                                f.get("managers"), name=name)
            except GoalError as exc:
                raise ConfigError(f"/families/{i}", str(exc)) from None
            out.append(fam)
        return out

    def model_path(self, seed: int) -> Path:
        return self.out / f"model_seed{seed}.grmlp"

    def _model_key(self, seed: int) -> str:
        return config_hash({"dataset": self.cfg["dataset"], "model": self.cfg["model"], "seed": seed})

    def train_model(self, seed: int):
        m = self.cfg["model"]
        _, train, _, _, _ = self.data()
        dims = [train.dim, *m["hidden"], train.class_count]
        model = classifier.Mlp.initialize(dims, seed=seed)
        tcfg = classifier.TrainConfig(m["learning_rate"], m["epochs"], m["batch_size"], seed)
        losses = classifier.train(model, train, tcfg)
        classifier.save(model, self.model_path(seed))
        (self.out / f"model_seed{seed}.json").write_text(json.dumps({"key": self._model_key(seed)}))
        return model, losses

    def model(self, seed: int):
        meta = self.out / f"model_seed{seed}.json"
        if self.model_path(seed).exists() and meta.exists():
            if json.loads(meta.read_text()).get("key") == self._model_key(seed):
                return classifier.load(self.model_path(seed))
        log.info("training model for seed %d", seed)
        return self.train_model(seed)[0]

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        log.info("wrote %s", path)
        return path


# --- renderers: transcript records -> CSV text ---------------------------------------

def _header(records) -> str:
    for r in records:
        if r.get("kind") == "header":
            return r["config_hash"]
    raise ValueError("transcript has no header record")


def render_train(records) -> dict[str, str]:
    rows = [[r["model_seed"], r["epoch"], r["loss"]] for r in records if r.get("kind") == "epoch"]
    return {"train_log.csv": render_csv(_header(records), ["model_seed", "epoch", "loss"], rows)}


def render_attack_eval(records) -> dict[str, str]:
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        if r.get("kind") == "trial":
            groups.setdefault((r["model_seed"], r["family"], r["attack"]), []).append(r)
    rows = []
    for (seed, fam, attack), rs in groups.items():
        n = len(rs)
        wins = sum(r["result"] for r in rs)
        adv = wins / n
        rows.append([seed, fam, attack, n, wins, adv, 1.0 - adv, float(np.sqrt(adv * (1 - adv) / n)),
                     sum(r["worst_case_queries"] for r in rs) / n])
    header = ["model_seed", "family", "attack", "trials", "successes", "advantage", "robustness", "stderr",
              "mean_worst_case_queries"]
    return {"attack_eval.csv": render_csv(_header(records), header, rows)}


def _metric_table(records):
    cols = ["benign_accuracy", "untargeted_robustness", "targeted_robustness"]
    per_seed: dict[int, dict] = {}
    for r in records:
        if r.get("kind") == "accuracy":
            per_seed.setdefault(r["model_seed"], {})["benign_accuracy"] = sum(r["correct"]) / len(r["correct"])
        elif r.get("kind") == "estimate":
            bits = r["bits"]
            name = r["metric"]
            if name not in cols:
                cols.append(name)
            per_seed.setdefault(r["model_seed"], {})[name] = 1.0 - sum(bits) / len(bits)
    return cols, per_seed


def render_metrics(records) -> dict[str, str]:
    chash = _header(records)
    cols, per_seed = _metric_table(records)
    rows = [[s] + [vals[c] for c in cols] for s, vals in per_seed.items()]
    out = {"metrics.csv": render_csv(chash, ["model_seed"] + cols, rows)}
    if len(per_seed) < 2:
        text = f"# config_hash: {chash}\n# {INSUFFICIENT}: {len(per_seed)} model seed(s); Pearson needs at least 2\n"
    else:
        prow = []
        for a in cols:
            row = [a]
            for b in cols:
                try:
                    row.append(pearson([v[a] for v in per_seed.values()], [v[b] for v in per_seed.values()]))
                except UndefinedCorrelation:
                    row.append("undefined")
            prow.append(row)
        text = render_csv(chash, ["metric"] + cols, prow)
    out["pearson.csv"] = text
    return out


def render_strategies(records) -> dict[str, str]:
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        if r.get("kind") == "campaign":
            groups.setdefault((r["k"], r["strategy"]), []).append(r)
    rows = []
    for (k, strat), rs in groups.items():
        mean = sum(r["attempts"] for r in rs) / len(rs)
        base = groups[(k, "random")]
        base_mean = sum(r["attempts"] for r in base) / len(base)
        ratio = mean / base_mean if base_mean > 0 else None
        rows.append([k, strat, len(rs), mean, sum(r["success"] for r in rs) / len(rs), ratio])
    header = ["k", "strategy", "campaigns", "mean_attempts", "success_rate", "baseline_ratio"]
    return {"strategies.csv": render_csv(_header(records), header, rows)}


def render_defend(records) -> dict[str, str]:
    chash = _header(records)
    ks = [[r["kappa"], r["average_accuracy"], r["accuracy_on_T"], r["group_based_robustness"], r["admissible"]]
          for r in records if r.get("kind") == "kappa"]
    out = {"kappa_search.csv": render_csv(chash, ["kappa", "average_accuracy", "accuracy_on_T",
                                                  "group_based_robustness", "admissible"], ks)}
    chosen = next(r["kappa"] for r in records if r.get("kind") == "chosen")
    vals = {}
    for who in ("defended", "baseline"):
        pred = next(r for r in records if r.get("kind") == "predictions" and r["model"] == who)
        bits = next(r["bits"] for r in records if r.get("kind") == "estimate" and r["model"] == who)
        correct = [p == y for p, y in zip(pred["predicted"], pred["labels"])]
        on_t = [c for c, y in zip(correct, pred["labels"]) if y in pred["target_classes"]]
        vals[who] = (sum(correct) / len(correct), sum(on_t) / len(on_t), 1.0 - sum(bits) / len(bits))
    d, b = vals["defended"], vals["baseline"]
    header = ["kappa", "average_accuracy", "accuracy_on_T", "group_based_robustness",
              "baseline_average_accuracy", "baseline_accuracy_on_T", "baseline_group_based_robustness",
              "delta_average_accuracy", "delta_accuracy_on_T", "delta_group_based_robustness"]
    row = [chosen, *d, *b, *(x - y for x, y in zip(d, b))]
    out["defense.csv"] = render_csv(chash, header, [row])
    return out


RENDERERS = {
    "train": render_train,
    "attack-eval": render_attack_eval,
    "metrics": render_metrics,
    "strategies": render_strategies,
    "defend": render_defend,
}


def replay(out_dir) -> dict[str, str]:
    """Re-render every CSV from ``transcript.jsonl`` alone."""
    records = read_transcript(Path(out_dir))
    out = {}
    for cmd, fn in RENDERERS.items():
        rs = records_for(records, cmd)
        if rs:
            out.update(fn(rs))
    return out


def _finish(run: Run, command: str, records: list[dict]) -> dict[str, str]:
    records = [{"kind": "header", "config_hash": run.hash}] + records
    write_transcript(run.out, command, records)
    files = RENDERERS[command](records_for(read_transcript(run.out), command))
    for name, text in files.items():
        run.write(name, text)
    return files


# --- commands ---------------------------------------------------------------------------

def cmd_gen_data(run: Run):
    """Write the train/test/validation splits and the data recipe."""
    full, train, test, val, gt = run.data()
    for name, part in (("train", train), ("test", test), ("val", val)):
        data_mod.write_csv(part, run.out / f"{name}.csv")
    recipe = {"config_hash": run.hash, "dataset": run.cfg["dataset"], "ground_truth": gt.to_dict(),
              "sizes": {"train": len(train), "test": len(test), "val": len(val)}}
    run.write("recipe.json", json.dumps(recipe, indent=2, sort_keys=True) + "\n")


def cmd_train(run: Run):
    """Train one model per configured seed and log the epoch losses."""
    records = []
    for seed in run.cfg["model"]["seeds"]:
        _, losses = run.train_model(seed)
        records += [{"kind": "epoch", "model_seed": seed, "epoch": e, "loss": v} for e, v in enumerate(losses)]
    return _finish(run, "train", records)


def _adversary(name, model, gt, fam, run: Run):
    if name == "best_guess":
        return best_guess_adversary(model, gt, fam, run.budget, run.attack_cfg)
    if name == "average_guess":
        return average_guess_adversary(model, gt, fam, run.budget, run.attack_cfg)
    return group_adversary(model, gt, fam, run.budget, run.attack_cfg, name)


def _worst_case_queries(attack: str, fam: GoalFamily, samples) -> int:
    sizes = [len(candidate_targets(fam, samples, j)) for j in range(len(samples))]
    if attack == "best_guess":
        return sum(sizes)
    return sum(1 for s in sizes if s)


def cmd_attack_eval(run: Run):
    """Compare advantages and query costs of the four attacks per family."""
    _, _, test, _, gt = run.data()
    families = run.families()
    if not families:
        raise ConfigError("/families", "attack-eval needs at least one goal family")
    records = []
    for seed in run.cfg["model"]["seeds"]:
        model = run.model(seed)
        for fam in families:
            for attack in ATTACKS:
                adv = _adversary(attack, model, gt, fam, run)
                for i in range(run.cfg["trials"]):
                    res = run_experiment(model, gt, test, fam, run.budget, adv, trial_rng(run.cfg["seed"], i))
                    records.append({"kind": "trial", "model_seed": seed, "family": fam.name, "attack": attack,
                                    "trial": i, "result": res.result,
                                    "worst_case_queries": _worst_case_queries(attack, fam, res.samples)})
                log.info("seed %d %s %s done", seed, fam.name, attack)
    return _finish(run, "attack-eval", records)


def cmd_metrics(run: Run):
    """Accuracy and robustness metrics per model seed, plus their Pearson matrix."""
    _, _, test, _, gt = run.data()
    families = run.families()
    records = []
    for seed in run.cfg["model"]["seeds"]:
        model = run.model(seed)
        rep = metric_suite(model, gt, test, run.budget, run.attack_cfg, families, run.cfg["trials"], run.cfg["seed"])
        correct = (model.predict(test.instances) == test.labels).tolist()
        records.append({"kind": "accuracy", "model_seed": seed, "correct": correct})
        for key, est in rep.estimates.items():
            metric = {"untargeted": "untargeted_robustness", "targeted": "targeted_robustness"}.get(key, key)
            records.append({"kind": "estimate", "model_seed": seed, "metric": metric, "bits": est.bits})
    files = _finish(run, "metrics", records)
    if INSUFFICIENT in files["pearson.csv"]:
        print(f"notice: {INSUFFICIENT}; Pearson correlations skipped (need at least 2 model seeds)", file=sys.stderr)
    return files


def cmd_strategies(run: Run):
    """Attempts needed by each campaign strategy per K."""
    st = run.cfg["strategies"]
    if st is None:
        raise ConfigError("/strategies", "section is required for this command")
    _, _, test, val, gt = run.data()
    n = test.class_count
    seed = run.cfg["model"]["seeds"][0]
    model = run.model(seed)
    prior = estimate_prior(model, val, st["sources"], st["targets"], run.budget, run.attack_cfg, gt=gt,
                           per_class=st["prior_per_class"])
    records = [{"kind": "prior", "matrix": prior.to_dict()}]
    for k in st["k"]:
        fam = GoalFamily.surjective(n, st["sources"], st["targets"], k, st["allow_reuse"], st["managers"])
        for c in range(st["campaigns"]):
            samples = generate(test, gt, fam, trial_rng(run.cfg["seed"], c))
            cache: dict = {}
            for strat in STRATEGIES:
                for r in range(st["random_repeats"] if strat == "random" else 1):
                    res = run_campaign(model, samples, st["targets"], k, strat, run.budget, run.attack_cfg, gt=gt,
                                       allow_reuse=st["allow_reuse"], managers=st["managers"], prior=prior,
                                       rng=np.random.default_rng([run.cfg["seed"], k, c, r]), cache=cache)
                    records.append({"kind": "campaign", "k": k, "campaign": c, "repeat": r, **res.to_record()})
        log.info("K=%d done", k)
    return _finish(run, "strategies", records)


def cmd_defend(run: Run):
    """Search kappa, train the defense and the baseline, and compare them."""
    d = run.cfg["defense"]
    if d is None:
        raise ConfigError("/defense", "section is required for this command")
    _, train, test, val, gt = run.data()
    n = train.class_count
    start = run.model(run.cfg["model"]["seeds"][0])
    a = run.cfg["attack"]
    dcfg = DefenseConfig(
        sources=tuple(d["sources"]), targets=tuple(d["targets"]), kappa=1.0, attack_budget=run.budget,
        attack_cfg=AttackConfig(d["attack_iterations"], a["step_size"], a["random_start"], a["seed"]),
        epochs=d["epochs"], batch_size=d["batch_size"], learning_rate=d["learning_rate"], seed=run.cfg["seed"],
    )
    family = GoalFamily.source_to_targets(n, d["sources"], targets=d["targets"], name="defense")
    baseline = start.copy()
    train_adversarial_baseline(baseline, train, dcfg)
    reference = (classifier.accuracy(baseline, val), accuracy_on(baseline, val, d["targets"]))
    kappa, table = search_kappa(start, train, val, gt, family, dcfg, reference, d["kappas"], d["slack"],
                                d["search_trials"], run.cfg["seed"])
    defended = start.copy()
    train_defense(defended, train, dcfg.with_kappa(kappa))
    classifier.save(defended, run.out / "defended.grmlp")
    classifier.save(baseline, run.out / "baseline_at.grmlp")
    rep = evaluate_defense(defended, baseline, gt, test, family, run.budget, run.attack_cfg, run.cfg["trials"],
                           run.cfg["seed"])
    records = [{"kind": "kappa", **c.__dict__} for c in table]
    records.append({"kind": "chosen", "kappa": kappa})
    for who, m in (("defended", defended), ("baseline", baseline)):
        records.append({"kind": "predictions", "model": who, "predicted": m.predict(test.instances).tolist(),
                        "labels": test.labels.tolist(), "target_classes": list(d["targets"])})
        records.append({"kind": "estimate", "model": who, "bits": [r["result"] for r in rep.records[who]]})
    files = _finish(run, "defend", records)
    run.write("defense.json", json.dumps({"config_hash": run.hash, "kappa": kappa, **rep.as_row()},
                                         indent=2, sort_keys=True) + "\n")
    return files


def _read_csv(path: Path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_report(run: Run):
    """Render SVG plots from the CSVs in the output directory."""
    hdr = f"config_hash: {run.hash}"
    made = []
    p = run.out / "metrics.csv"
    if p.exists():
        rows = _read_csv(p)
        cols = [c for c in rows[0] if c != "model_seed"] if rows else []
        groups = {c: [float(r[c]) for r in rows] for c in cols}
        made.append(run.write("metrics.svg", svg.box_plot(groups, "Metric distribution across model seeds",
                                                          "value", hdr)))
    p = run.out / "attack_eval.csv"
    if p.exists():
        rows = _read_csv(p)
        fams = list(dict.fromkeys(r["family"] for r in rows))
        series = {a: [np.mean([float(r["advantage"]) for r in rows if r["attack"] == a and r["family"] == f])
                      for f in fams] for a in ATTACKS}
        made.append(run.write("attack_eval.svg", svg.bar_chart(fams, series, "Advantage per attack", "advantage", hdr)))
    p = run.out / "strategies.csv"
    if p.exists():
        rows = _read_csv(p)
        ks = list(dict.fromkeys(r["k"] for r in rows))
        series = {s: [next((float(r["mean_attempts"]) for r in rows if r["k"] == k and r["strategy"] == s), np.nan)
                      for k in ks] for s in STRATEGIES}
        made.append(run.write("strategies.svg", svg.bar_chart([f"K={k}" for k in ks], series,
                                                              "Mean attempts per strategy", "attempts", hdr)))
    p = run.out / "defense.csv"
    if p.exists():
        row = _read_csv(p)[0]
        cats = ["average_accuracy", "accuracy_on_T", "group_based_robustness"]
        series = {"defended": [float(row[c]) for c in cats], "baseline": [float(row["baseline_" + c]) for c in cats]}
        made.append(run.write("defense.svg", svg.bar_chart(cats, series, "Defense trade-off", "fraction", hdr)))
    if not made:
        raise ConfigError("/output_dir", f"no CSV results to plot in {run.out}")
    return made


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack-eval": cmd_attack_eval,
    "metrics": cmd_metrics,
    "strategies": cmd_strategies,
    "defend": cmd_defend,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grouprobust", description="Group-based robustness studies on small MLPs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
        sp.add_argument("--config", required=True, help="path to the JSON run config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_mod.load(args.config)
        HANDLERS[args.command](Run(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, AttackError, ModelFormatError, DatasetError, DefenseError, FloatingPointError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
