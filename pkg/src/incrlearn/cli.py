"""Experiment front door.

Verbs:
  run <config.toml>      execute every (arm x tau x seed) training run and
                         write per-run JSON logs plus aggregate CSV tables
  report <dir>           recompute aggregates from the raw run logs
  gen-data <spec> <csv>  materialize a synthetic multi-domain dataset
  grad-check             randomized analytic-vs-finite-difference audit

Config and data specs are TOML.  INCRLEARN_OUT sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .exceptions import ConfigError, FormatError, IncrLearnError
from . import data as data_mod
from . import losses, numerics
from .metrics import METRIC_CSV_HEADER
from .protocol import LOG_SCHEMA_VERSION, IncrementPlan, IncrementSpec, run_plan

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_REPORT = 4

ENV_OUT = "INCRLEARN_OUT"
KNOWN_ARMS = ("with_md", "without_md", "ce_only", "finetune")

# defaults for every run unless the config overrides them
PLAN_DEFAULTS = {
    "epochs": 20,
    "batch_size": 16,
    "tau": 2.0,
    "alpha": 0.5,
    "beta": 0.25,
    "gamma": 0.25,
    "exemplar_fraction": 0.1,
    "new_data_fraction": 1.0,
    "hidden_sizes": [64, 32],
    "epsilon": 1e-4,
    "smoothing": 0.1,
    "min_fit_samples": 2,
    "posterior_refresh": "epoch",
    "md_warmup_epochs": 0,
    "shared_labels": False,
}


def _load_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _spec_from_dict(doc):
    """Synthetic dataset spec: top-level dim plus one table per domain."""
    dim = int(doc.get("dim", data_mod.DEFAULT_DIM))
    domains = doc.get("domains")
    if not domains:
        raise ConfigError("synthetic spec must declare at least one [[domains]] table")
    specs = []
    for d in domains:
        if "classes" in d and isinstance(d["classes"], list) and d["classes"] and isinstance(d["classes"][0], dict):
            classes = tuple(
                data_mod.ClassGenerator(
                    label=int(c["label"]),
                    mean=np.asarray(c["mean"], dtype=float),
                    cov_scale=float(c.get("scale", 1.0)),
                    n_samples=int(c.get("count", 100)),
                )
                for c in d["classes"]
            )
            specs.append(
                data_mod.DomainSpec(
                    domain_id=int(d["id"]),
                    classes=classes,
                    gain=float(d.get("gain", 1.0)),
                    bias=float(d.get("bias", 0.0)),
                    noise_scale=float(d.get("noise", 0.0)),
                    seed=int(d.get("seed", 0)),
                )
            )
        else:
            labels = [int(c) for c in d["labels"]]
            specs.append(
                data_mod.synthetic_domain_spec(
                    domain_id=int(d["id"]),
                    labels=labels,
                    dim=dim,
                    samples_per_class=int(d.get("samples_per_class", 100)),
                    seed=int(d.get("seed", 0)),
                    gain=float(d.get("gain", 1.0)),
                    bias=float(d.get("bias", 0.0)),
                    noise_scale=float(d.get("noise", 0.0)),
                    separation=float(d.get("separation", 6.0)),
                    pair_offset=float(d.get("pair_offset", 2.5)),
                    spread=float(d.get("spread", 1.0)),
                )
            )
    return specs


def _resolve_dataset(cfg, config_dir):
    src = cfg.get("data", {})
    has_csv = "csv" in src
    has_synth = "synthetic" in src
    if has_csv == has_synth:
        raise ConfigError("config must give exactly one data source: data.csv or data.synthetic")
    if has_csv:
        return data_mod.load_dataset(config_dir / src["csv"])
    synth = src["synthetic"]
    if isinstance(synth, str):
        doc = _load_toml(config_dir / synth)
    else:
        doc = synth
    specs = _spec_from_dict(doc)
    return data_mod.concat_datasets([data_mod.generate_domain(s) for s in specs])


def _plan_settings(cfg):
    plan = dict(PLAN_DEFAULTS)
    plan.update(cfg.get("plan", {}))
    increments = plan.pop("increments", None) or cfg.get("plan", {}).get("increments")
    if not increments:
        raise ConfigError("config must declare at least one [[plan.increments]] table")
    return plan, increments


def build_plan(settings, increments, arm, tau, run_seed):
    """Translate config tables plus an ablation arm into an IncrementPlan."""
    if arm not in KNOWN_ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}; known: {KNOWN_ARMS}")
    alpha, beta, gamma = settings["alpha"], settings["beta"], settings["gamma"]
    use_exemplars, cumulative = True, False
    if arm == "without_md":
        beta = 0.0
    elif arm == "ce_only":
        alpha, beta, gamma = 1.0, 0.0, 0.0
        use_exemplars = False
    elif arm == "finetune":
        alpha, beta, gamma = 1.0, 0.0, 0.0
        use_exemplars = False
        cumulative = True
    incs = []
    for i, table in enumerate(increments):
        incs.append(
            IncrementSpec(
                kind=table.get("kind", "disease"),
                new_class_ids=tuple(int(c) for c in table["classes"]),
                domain_id=int(table.get("domain", 0)),
                epochs=int(table.get("epochs", settings["epochs"])),
                batch_size=int(table.get("batch_size", settings["batch_size"])),
                tau=float(tau),
                alpha=alpha,
                beta=beta,
                gamma=gamma,
                exemplar_fraction=float(
                    table.get("exemplar_fraction", settings["exemplar_fraction"])
                ),
                new_data_fraction=float(
                    table.get("new_data_fraction", settings["new_data_fraction"])
                ),
                seed=int(run_seed) * 1009 + i,
            )
        )
    return IncrementPlan(
        increments=tuple(incs),
        hidden_sizes=tuple(settings["hidden_sizes"]),
        init_seed=int(run_seed),
        epsilon=float(settings["epsilon"]),
        smoothing=float(settings["smoothing"]),
        min_fit_samples=int(settings["min_fit_samples"]),
        posterior_refresh=settings["posterior_refresh"],
        md_warmup_epochs=int(settings["md_warmup_epochs"]),
        shared_labels=bool(settings["shared_labels"]),
        use_exemplars=use_exemplars,
        cumulative=cumulative,
    )


def run_one(settings, increments, arm, tau, run_seed, dataset):
    """Execute a single sweep point; returns the run payload dict."""
    plan = build_plan(settings, increments, arm, tau, run_seed)
    logs, _state = run_plan(plan, dataset)
    final = logs[-1]
    return {
        "schema_version": LOG_SCHEMA_VERSION,
        "run": {
            "arm": arm,
            "tau": tau,
            "seed": run_seed,
            "alpha": plan.increments[0].alpha,
            "beta": plan.increments[0].beta,
            "gamma": plan.increments[0].gamma,
        },
        "final_accuracy": final.overall_accuracy,
        "final_error": 1.0 - final.overall_accuracy,
        "final_forgetting": final.forgetting,
        "per_domain_accuracy": {str(k): v for k, v in final.per_domain_accuracy.items()},
        "increments": [log.to_json_dict() for log in logs],
    }


def _run_payload_worker(args):
    return run_one(*args)


def run_id(arm, tau, seed):
    return f"{arm}_tau{tau:g}_seed{seed}"


def _write_json(path, payload):
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def cmd_run(args):
    config_path = Path(args.config)
    cfg = _load_toml(config_path)
    settings, increments = _plan_settings(cfg)
    dataset = _resolve_dataset(cfg, config_path.parent)

    sweep = cfg.get("sweep", {})
    taus = [float(t) for t in sweep.get("taus", [settings["tau"]])]
    if any(t <= 0 for t in taus):
        raise ConfigError("tau grid values must be positive")
    seeds = [int(s) for s in sweep.get("seeds", [0])]
    if args.seed is not None:
        seeds = [args.seed]
    if not seeds:
        raise ConfigError("need at least one seed")
    arms = list(sweep.get("arms", ["with_md"]))

    out_root = Path(args.out or cfg.get("output", {}).get("dir") or os.environ.get(ENV_OUT, "out"))
    runs_dir = out_root / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    jobs = [
        (settings, increments, arm, tau, seed, dataset)
        for arm in arms
        for tau in taus
        for seed in seeds
    ]
    started = time.time()
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            payloads = list(pool.map(_run_payload_worker, jobs))
    else:
        payloads = [run_one(*job) for job in jobs]
    for job, payload in zip(jobs, payloads):
        _, _, arm, tau, seed, _ = job
        _write_json(runs_dir / f"{run_id(arm, tau, seed)}.json", payload)

    summary = aggregate(out_root)
    summary["header"] = {
        "config": str(config_path),
        "started_unix": started,
        "elapsed_s": time.time() - started,
    }
    _write_json(out_root / "summary.json", summary)
    (out_root / "summary.txt").write_text(render_summary(summary), encoding="utf-8")
    print(f"wrote {len(payloads)} runs and aggregates under {out_root}")
    return EXIT_OK


def _check_log_identity(payload, tol=1e-9):
    """Recheck the weighted-sum bookkeeping inside a run log."""
    run = payload["run"]
    a, b, g = run["alpha"], run["beta"], run["gamma"]
    for inc in payload["increments"]:
        for ep in inc["epochs"]:
            expect = a * ep["l_c"] + b * ep["l_md"] + g * ep["l_d"]
            if abs(ep["l_il"] - expect) > tol:
                return False
    return True


def aggregate(out_root):
    """Recompute all aggregate tables from the raw per-run JSON logs."""
    runs_dir = Path(out_root) / "runs"
    files = sorted(runs_dir.glob("*.json"))
    if not files:
        raise FormatError(f"no run logs under {runs_dir}")
    runs = []
    bad = []
    for f in files:
        try:
            payload = json.loads(f.read_text(encoding="utf-8"))
            payload["_file"] = f.name
        except (OSError, json.JSONDecodeError):
            bad.append(f.name)
            continue
        if not _check_log_identity(payload):
            bad.append(f.name)
            continue
        runs.append(payload)
    if bad:
        raise FormatError(f"corrupt or inconsistent run logs: {bad}")

    by_arm_tau = {}
    for p in runs:
        key = (p["run"]["arm"], p["run"]["tau"])
        by_arm_tau.setdefault(key, []).append(p)

    tau_rows = []
    for (arm, tau), group in sorted(by_arm_tau.items()):
        errors = [p["final_error"] for p in group]
        tau_rows.append(
            {
                "arm": arm,
                "tau": tau,
                "median_error": statistics.median(errors),
                "mean_error": statistics.fmean(errors),
                "n_seeds": len(errors),
            }
        )
    best_tau = {}
    for arm in {r["arm"] for r in tau_rows}:
        arm_rows = [r for r in tau_rows if r["arm"] == arm]
        best = min(arm_rows, key=lambda r: r["median_error"])
        best_tau[arm] = {"tau": best["tau"], "median_error": best["median_error"]}

    arm_rows = []
    by_arm = {}
    for p in runs:
        by_arm.setdefault(p["run"]["arm"], []).append(p)
    for arm, group in sorted(by_arm.items()):
        accs = [p["final_accuracy"] for p in group]
        forgets = [p["final_forgetting"] for p in group if p["final_forgetting"] is not None]
        arm_rows.append(
            {
                "arm": arm,
                "median_final_accuracy": statistics.median(accs),
                "mean_final_accuracy": statistics.fmean(accs),
                "median_forgetting": statistics.median(forgets) if forgets else None,
                "n_runs": len(group),
            }
        )

    metric_lines = [f"run,arm,tau,seed,{METRIC_CSV_HEADER}"]
    for p in runs:
        r = p["run"]
        rid = run_id(r["arm"], r["tau"], r["seed"])
        for inc in p["increments"]:
            for row in inc["metric_rows"]:
                metric_lines.append(
                    f"{rid},{r['arm']},{r['tau']:g},{r['seed']},"
                    f"{row['increment']},{row['domain']},{row['class']},"
                    f"{row['accuracy']:.6f},{row['tpr']:.6f},{row['ppv']:.6f},{row['f1']:.6f},"
                    f"{row.get('forgetting', '')}"
                )

    out_root = Path(out_root)
    with open(out_root / "tau_sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("arm,tau,median_error,mean_error,n_seeds\n")
        for r in tau_rows:
            fh.write(
                f"{r['arm']},{r['tau']:g},{r['median_error']:.6f},{r['mean_error']:.6f},{r['n_seeds']}\n"
            )
    with open(out_root / "ablation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("arm,median_final_accuracy,mean_final_accuracy,median_forgetting,n_runs\n")
        for r in arm_rows:
            forget = "" if r["median_forgetting"] is None else f"{r['median_forgetting']:.6f}"
            fh.write(
                f"{r['arm']},{r['median_final_accuracy']:.6f},{r['mean_final_accuracy']:.6f},"
                f"{forget},{r['n_runs']}\n"
            )
    (out_root / "metrics.csv").write_text("\n".join(metric_lines) + "\n", encoding="utf-8")

    return {
        "tau_sweep": tau_rows,
        "best_tau": best_tau,
        "ablation": arm_rows,
        "n_runs": len(runs),
    }


def render_summary(summary):
    lines = []
    header = summary.get("header", {})
    if header:
        lines.append(f"config: {header.get('config')}")
        lines.append(f"elapsed_s: {header.get('elapsed_s', 0):.1f}")
    lines.append(f"runs: {summary['n_runs']}")
    lines.append("")
    lines.append("tau sweep (median classification error per arm):")
    for r in summary["tau_sweep"]:
        lines.append(f"  {r['arm']:>12s}  tau={r['tau']:<4g} error={r['median_error']:.4f}")
    lines.append("best tau per arm:")
    for arm, best in sorted(summary["best_tau"].items()):
        lines.append(f"  {arm:>12s}  tau={best['tau']:<4g} error={best['median_error']:.4f}")
    lines.append("")
    lines.append("ablation arms (medians over runs):")
    for r in summary["ablation"]:
        forget = "n/a" if r["median_forgetting"] is None else f"{r['median_forgetting']:.4f}"
        lines.append(
            f"  {r['arm']:>12s}  accuracy={r['median_final_accuracy']:.4f} forgetting={forget}"
        )
    return "\n".join(lines) + "\n"


def cmd_report(args):
    summary = aggregate(Path(args.dir))
    sys.stdout.write(render_summary(summary))
    return EXIT_OK


def cmd_gen_data(args):
    doc = _load_toml(args.spec)
    specs = _spec_from_dict(doc)
    dataset = data_mod.concat_datasets([data_mod.generate_domain(s) for s in specs])
    data_mod.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} rows ({dataset.dim}-D) to {args.out}")
    return EXIT_OK


def cmd_grad_check(args):
    """Randomized analytic-vs-central-difference audit of every loss term."""
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for case in range(args.cases):
        n_old = int(rng.integers(1, 4))
        n_new = int(rng.integers(1, 4))
        tau = float(rng.choice([1.5, 2.0, 2.5, 3.0, 3.5]))
        b_s = int(rng.integers(1, 4))
        raw = rng.normal(0.0, 2.0, size=(b_s, n_old + n_new))
        views = [losses.LogitView(raw[i, :n_old], raw[i, n_old:], tau) for i in range(b_s)]
        t_old = [rng.dirichlet(np.ones(n_old)) for _ in range(b_s)]
        t_new = [rng.dirichlet(np.ones(n_new)) for _ in range(b_s)]
        targets = [losses.TargetView(t_old[i], t_new[i]) for i in range(b_s)]
        samples = {
            c: [rng.normal(0.0, 1.0, n_old + n_new) for _ in range(n_old + n_new + 2)]
            for c in range(n_old + n_new)
        }
        post = losses.fit_posterior_model(samples, {c: 5 for c in samples}, epsilon=1e-2)
        flags = rng.random(b_s) < 0.5

        def il(flat, raw=raw, views_tau=tau, n_old=n_old, targets=targets, post=post, flags=flags, b_s=b_s):
            m = flat.reshape(raw.shape)
            vs = [losses.LogitView(m[i, :n_old], m[i, n_old:], views_tau) for i in range(b_s)]
            c = losses.classification_loss(targets, vs)[0]
            d = losses.distillation_loss(targets, vs)[0]
            md = losses.mutual_distillation_loss(post, targets, vs, flags)[0]
            return 0.5 * c + 0.25 * md + 0.25 * d

        part = losses.combined_loss(
            0.5,
            0.25,
            0.25,
            losses.classification_loss(targets, views),
            losses.mutual_distillation_loss(post, targets, views, flags)[:2],
            losses.distillation_loss(targets, views),
        )
        numeric = numerics.finite_diff_grad(il, raw.reshape(-1), h=1e-6).reshape(raw.shape)
        denom = max(np.abs(numeric).max(), 1e-8)
        rel = np.abs(part.grad_logits - numeric).max() / denom
        worst = max(worst, rel)
    print(f"grad-check: {args.cases} cases, worst relative error {worst:.3e}")
    if worst > 1e-4:
        print("grad-check FAILED (tolerance 1e-4)", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="incrlearn", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="override the seed list")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--out", default=None, help=f"output dir (default: config, then ${ENV_OUT})")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="recompute aggregates from run logs")
    p_rep.add_argument("dir")
    p_rep.set_defaults(func=cmd_report)

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset CSV")
    p_gen.add_argument("spec")
    p_gen.add_argument("out")
    p_gen.set_defaults(func=cmd_gen_data)

    p_gc = sub.add_parser("grad-check", help="randomized gradient audit")
    p_gc.add_argument("--cases", type=int, default=25)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_REPORT
    except IncrLearnError as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
