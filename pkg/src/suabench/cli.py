"""``suabench`` command line: data generation, training, evaluation, bounds, ablations.

Exit codes: 0 success, 1 an asserted invariant failed (or training diverged),
2 configuration / precondition error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bounds import (_pointwise_terms, verify_lemma1, verify_lemma2, verify_prop1,
                     verify_theorem1, verify_theorem2)
from .config import ConfigError, RunConfig, build_config, load_toml
from .evaluate import ConfidenceMap, calibrate_tau, rows_to_csv
from .experiments import (CellResult, coverage_sweep, k_spearman, lemma1_setup, prepare_task,
                          run_cell, seed_average, sel_keys)
from .prob import ContractError
from .rng import stream
from .sua import SuaConfig, infer_with_abstention, score_rows_csv
from .train import Method, TrainingDiverged
from .world import SPLITS, by_split, world_to_dict

log = logging.getLogger("suabench")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("gen-data", "train", "eval", "score", "abstain", "verify", "ablate", "report")
# commands that act on one trained model per cell unless --method says otherwise
SINGLE_MODEL = {"score", "abstain", "verify"}


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"{type(o).__name__} is not JSON serialisable")


class Run:
    """A fresh output directory plus the artifacts written into it."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.run_id = f"{command}-{cfg.hash()[:12]}"
        root = Path(cfg.output_dir)
        path = root / self.run_id
        n = 0
        while path.exists():  # never overwrite an earlier run
            n += 1
            path = root / f"{self.run_id}-{n}"
        path.mkdir(parents=True)
        self.path = path
        self.artifacts: list[str] = []
        self.started = time.perf_counter()

    def write(self, rel: str, text: str) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.artifacts.append(rel)
        return p

    def write_json(self, rel: str, obj) -> Path:
        return self.write(rel, json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")

    def finish(self, extra: dict | None = None) -> None:
        manifest = {"run_id": self.run_id, "command": self.command, "version": __version__,
                    "config_hash": self.cfg.hash(), "config": self.cfg.to_dict(),
                    "seeds": list(self.cfg.seeds), "artifacts": sorted(self.artifacts),
                    **(extra or {})}
        (self.path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2, default=_json_default) + "\n")
        # timing is kept out of the manifest so that reruns stay byte-identical
        elapsed = time.perf_counter() - self.started
        (self.path / "run.log").write_text(f"wall_clock_seconds={elapsed:.3f}\n")
        print(self.path)


def _cells(cfg: RunConfig):
    for task in cfg.tasks:
        for seed in cfg.seeds:
            prepared = prepare_task(task, seed, **cfg.task_overrides)
            for method in cfg.methods:
                yield task, seed, method, prepared


def _cell(cfg: RunConfig, task, method, seed, prepared) -> CellResult:
    log.info("cell task=%s method=%s seed=%d", task, method.value, seed)
    return run_cell(task, method, seed, cfg.experiment(), prepared)


# --- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    run = Run(cfg, "gen-data")
    for task in cfg.tasks:
        for seed in cfg.seeds:
            world, data = prepare_task(task, seed, **cfg.task_overrides)
            base = f"{task}/seed{seed}"
            run.write_json(f"{base}/world.json", world_to_dict(world))
            for split in SPLITS:
                lines = [json.dumps(e.to_dict(), sort_keys=True) for e in by_split(data, split)]
                run.write(f"{base}/{split.value}.jsonl", "\n".join(lines) + "\n")
    run.finish()
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    from .train import fit_temperature, train
    from .world import Split
    run = Run(cfg, "train")
    for task, seed, method, (world, data) in _cells(cfg):
        log.info("train task=%s method=%s seed=%d", task, method.value, seed)
        params, hist = train(world, data, replace(cfg.train, method=method, seed=seed), cfg.perturb)
        temp = fit_temperature(params, by_split(data, Split.VALID)).temperature
        base = f"{task}/{method.value}/seed{seed}"
        run.write(f"{base}/history.csv", hist.to_csv())
        run.write_json(f"{base}/checkpoint.json", {"params": params.to_dict(), "temperature_scaler": temp})
    run.finish()
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    run = Run(cfg, "eval")
    all_rows, sweep = [], []
    by_group: dict[tuple[str, str], list[dict]] = {}
    for task, seed, method, prepared in _cells(cfg):
        res = _cell(cfg, task, method, seed, prepared)
        for r in res.rows:
            by_group.setdefault((task, r["method"]), []).append(r)
            all_rows.append(r)
        for r in coverage_sweep(res.table, cfg.coverages):
            sweep.append({"task": task, "method": method.value, "seed": seed, **r})
    for (task, method), rows in by_group.items():
        run.write(f"{task}/{method}/metrics.csv", rows_to_csv(rows))
    run.write("metrics.csv", rows_to_csv(all_rows))
    run.write("metrics_mean.csv", rows_to_csv(
        seed_average(all_rows, ("accuracy", "robust_accuracy", "ece", "auroc", *sel_keys(cfg.coverages)))))
    run.write("coverage_sweep.csv", rows_to_csv(sweep))
    run.finish()
    return EXIT_OK


def cmd_score(cfg: RunConfig, args) -> int:
    run = Run(cfg, "score")
    for task, seed, method, prepared in _cells(cfg):
        res = _cell(cfg, task, method, seed, prepared)
        t = res.table
        rows = []
        jsonl = []
        for i, e in enumerate(res.eval_examples):
            decision = "abstain" if t.sua[i] > cfg.sua.tau else f"answer({int(t.pred[i])})"
            rows.append([e.id, t.sensitivity[i], t.entropy[i], t.sua[i], decision])
            jsonl.append(json.dumps({"input_id": e.id, "label": e.y, "pred": int(t.pred[i]),
                                     **{name: float(t.score(name)[i]) for name in
                                        ("entropy", "self_consistency", "temp_scaled_conf", "sua")},
                                     "sensitivity": float(t.sensitivity[i])}, sort_keys=True))
        buf = ["input_id,sensitivity,entropy,score,decision"]
        buf += [f"{r[0]},{r[1]:.10g},{r[2]:.10g},{r[3]:.10g},{r[4]}" for r in rows]
        base = f"{task}/{method.value}/seed{seed}"
        run.write(f"{base}/scores.csv", "\n".join(buf) + "\n")
        run.write(f"{base}/scores.jsonl", "\n".join(jsonl) + "\n")
    run.finish()
    return EXIT_OK


def _parse_tokens(text: str) -> tuple[int, ...]:
    try:
        toks = tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError as exc:
        raise ConfigError(f"--input must be comma-separated token ids: {exc}") from exc
    if not toks:
        raise ConfigError("--input is empty")
    return toks


def cmd_abstain(cfg: RunConfig, args) -> int:
    run = Run(cfg, "abstain")
    target = args.coverage if args.coverage is not None else 0.8
    for task, seed, method, prepared in _cells(cfg):
        world, data = prepared
        res = _cell(cfg, task, method, seed, prepared)
        rng = stream(seed, "eval")
        tau = args.tau
        if tau is None:
            from .sua import score_batch
            valid = by_split(data, "valid")
            if not 0.0 < target < 1.0:
                raise ConfigError("--coverage for threshold calibration must lie in (0, 1)")
            tau = calibrate_tau([e.score for e in score_batch(
                res.params, world, [e.tokens for e in valid], cfg.sua, cfg.perturb, rng)], target)
        scfg = replace(cfg.sua, tau=tau)
        base = f"{task}/{method.value}/seed{seed}"
        if args.input:
            toks = _parse_tokens(args.input)
            out = infer_with_abstention(res.params, world, toks, scfg, cfg.perturb, rng)
            d = out.diagnostics
            run.write_json(f"{base}/decision.json", {
                "tokens": list(toks), "tau": tau, "decision": out.decision, "score": d.score,
                "entropy": d.entropy, "sensitivity": d.sensitivity_hat,
                "per_perturbation_divergences": list(d.per_perturbation_divergences)})
            continue
        rows, answered, correct = [], [], []
        for e in res.eval_examples:
            out = infer_with_abstention(res.params, world, e.tokens, scfg, cfg.perturb, rng)
            rows.append((e.id, out.diagnostics, out.decision))
            answered.append(not out.abstain)
            correct.append(out.label == e.y if not out.abstain else False)
        answered = np.array(answered)
        cov = float(answered.mean())
        sel = float(np.array(correct)[answered].mean()) if answered.any() else float("nan")
        run.write(f"{base}/decisions.csv", score_rows_csv(rows))
        run.write_json(f"{base}/summary.json", {"tau": tau, "coverage": cov, "selective_accuracy": sel,
                                               "n": len(rows), "calibrated_for_coverage":
                                               None if args.tau is not None else target})
    run.finish()
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    from .evaluate import CollapseThresholds
    run = Run(cfg, "verify")
    summaries = []
    failed = False
    for task, seed, method, prepared in _cells(cfg):
        world, data = prepared
        res = _cell(cfg, task, method, seed, prepared)
        examples = res.eval_examples
        rng = stream(seed, "eval")
        tv_perturb = cfg.perturb
        terms = _pointwise_terms(res.params, world, examples, cfg.bounds, tv_perturb, rng)
        valid_scores = _valid_sua_tv(res, world, data, cfg, rng)
        taus = [calibrate_tau(valid_scores, c) for c in (0.5, 0.6, 0.7, 0.8, 0.9)] + [math.inf]
        reports = [verify_theorem1(res.params, world, examples, cfg.bounds, tv_perturb, terms=terms),
                   verify_prop1(res.params, world, examples, taus, cfg.bounds, tv_perturb, terms=terms),
                   verify_theorem2(res.params, examples, terms.sensitivity,
                                   ConfidenceMap.for_labels(world.num_labels), 15, cfg.bounds.lam)]
        lw, lex, lparams = lemma1_setup(seed)
        reports.append(verify_lemma1(lw, lparams, CollapseThresholds(math.log(2), 0.1), lex))
        reports.append(verify_lemma2(stream(seed, "eval")))
        base = f"{task}/{method.value}/seed{seed}"
        for rep in reports:
            run.write(f"{base}/{rep.theorem}.csv", rep.to_csv())
            summaries.append({"task": task, "method": method.value, "seed": seed, **rep.summary()})
            failed |= rep.asserted and not rep.passed
        ks = k_spearman(res.params, world, examples, sua_config=cfg.sua, perturb_config=cfg.perturb,
                        seed=seed)
        run.write(f"{base}/k_spearman.csv", rows_to_csv(ks))
    run.write_json("summary.json", summaries)
    for s in summaries:
        status = "PASS" if s["passed"] else ("FAIL" if s["asserted"] else "LOG ")
        print(f"{status} {s['theorem']:<9} task={s['task']} seed={s['seed']} "
              f"violation_rate={s['violation_rate']:.4f} n={s['n_checked']}", file=sys.stderr)
    run.finish({"asserted_failure": failed})
    return EXIT_INVARIANT if failed else EXIT_OK


def _valid_sua_tv(res: CellResult, world, data, cfg: RunConfig, rng) -> list[float]:
    """SUA scores (total-variation sensitivity) on validation, for the threshold grid."""
    from .sua import score_batch
    scfg = SuaConfig(lam=cfg.bounds.lam, divergence=cfg.bounds.divergence, K=cfg.perturb.K)
    valid = by_split(data, "valid")
    return [e.score for e in score_batch(res.params, world, [e.tokens for e in valid], scfg,
                                         cfg.perturb, rng)]


ABLATION_LAMBDAS = (0.1, 0.5, 1.0, 2.0, 5.0)
ABLATION_KS = (1, 4, 8)
ABLATION_MIXTURES = {"default": (0.5, 0.3, 0.2), "paraphrase_only": (1.0, 0.0, 0.0),
                     "adversarial_only": (0.0, 0.0, 1.0)}


def cmd_ablate(cfg: RunConfig, args) -> int:
    run = Run(cfg, "ablate")
    tables: dict[str, list[dict]] = {"table4": [], "lambda": [], "k": [], "mixture": []}
    cache: dict[tuple, list[dict]] = {}

    def cell(task, seed, prepared, method=Method.SUA_TR, lam=None, K=None, weights=None):
        key = (task, seed, method, lam, K, weights)
        if key not in cache:
            exp = cfg.experiment()
            tr, pc, sc = exp.train, exp.perturb, exp.sua
            if lam is not None:
                tr, sc = replace(tr, lam=lam), replace(sc, lam=lam)
            if K is not None:
                tr, pc, sc = replace(tr, K=K), replace(pc, K=K), replace(sc, K=K)
            if weights is not None:
                pc = replace(pc, weights=weights)
            exp = replace(exp, train=tr, perturb=pc, sua=sc)
            log.info("ablate task=%s seed=%d method=%s lam=%s K=%s weights=%s",
                     task, seed, method.value, lam, K, weights)
            cache[key] = run_cell(task, method, seed, exp, prepared).rows
        return cache[key]

    for task in cfg.tasks:
        for seed in cfg.seeds:
            prepared = prepare_task(task, seed, **cfg.task_overrides)
            for m in (Method.SUA_TR, Method.SUA_TR_MINUS_ENT, Method.SUA_TR_MINUS_CONS):
                tables["table4"] += [{"variant": m.value, **r} for r in cell(task, seed, prepared, m)]
            for lam in ABLATION_LAMBDAS:
                tables["lambda"] += [{"variant": f"lambda={lam:g}", **r}
                                     for r in cell(task, seed, prepared, lam=lam if lam != cfg.sua.lam else None)]
            for K in ABLATION_KS:
                tables["k"] += [{"variant": f"K={K}", **r}
                                for r in cell(task, seed, prepared, K=K if K != cfg.perturb.K else None)]
            for name, w in ABLATION_MIXTURES.items():
                w = None if w == cfg.perturb.weights else w
                tables["mixture"] += [{"variant": name, **r} for r in cell(task, seed, prepared, weights=w)]
    for name, rows in tables.items():
        run.write(f"ablation_{name}.csv", rows_to_csv(rows))
    run.finish()
    return EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = float(v) if k not in ("task", "method", "score", "variant") else v
            except ValueError:
                pass
    return rows


def cmd_report(cfg: RunConfig, args) -> int:
    src = Path(args.run_dir)
    metrics = src / "metrics.csv"
    if not metrics.is_file():
        raise ConfigError(f"{metrics} not found; point report at an eval run directory")
    rows = _read_csv(metrics)
    cols = ("accuracy", "robust_accuracy", "ece", "auroc", "sel_acc_80")
    cols = tuple(c for c in cols if c in rows[0])
    mean = seed_average(rows, cols)
    lines = ["| task | method | " + " | ".join(cols) + " |",
             "|" + "---|" * (len(cols) + 2)]
    for r in mean:
        cells = ["—" if math.isnan(r[c]) else f"{r[c]:.3f}" for c in cols]
        lines.append(f"| {r['task']} | {r['method']} | " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    out = src / "report.md"
    n = 0
    while out.exists():
        n += 1
        out = src / f"report-{n}.md"
    out.write_text(text)
    (out.with_suffix(".csv")).write_text(rows_to_csv(mean))
    print(text, end="")
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "score": cmd_score,
            "abstain": cmd_abstain, "verify": cmd_verify, "ablate": cmd_ablate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="suabench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("run_dir", help="an eval run directory containing metrics.csv")
            continue
        p.add_argument("--config", type=Path, help="TOML file with [task]/[train]/[perturb]/[sua]/[bounds]")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="root output directory (default: runs)")
        p.add_argument("--method", choices=[m.value for m in Method])
        p.add_argument("--task")
        p.add_argument("--coverage", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--k", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        if name == "abstain":
            p.add_argument("--input", help="comma-separated token ids of a single input")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            return cmd_report(RunConfig(), args)
        raw = load_toml(args.config) if args.config else {}
        method = args.method
        if method is None and args.command in SINGLE_MODEL and "methods" not in raw:
            method = Method.SUA_TR.value
        cfg = build_config(raw, seed=args.seed, out=args.out, method=method, task=args.task,
                           coverage=args.coverage, tau=args.tau, k=args.k, lam=args.lam)
        return HANDLERS[args.command](cfg, args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
