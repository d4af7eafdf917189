"""Command-line harness: ``python -m latent_poison <subcommand>``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from .. import attack as atk
from .. import classifiers as clf
from .. import latentstats, metrics, substrate
from .. import vae as vae_mod
from ..dataio import load_dataset
from ..errors import ConfigError, LatentPoisonError, MissingCheckpoint
from . import config as cfgmod
from . import report as report_mod
from .grids import emit_grid

log = logging.getLogger("latent_poison")

DEFAULT_DATA_ROOT = os.environ.get("MNIST_ROOT", "data/mnist")


def code_version() -> dict:
    src = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for p in sorted(src.rglob("*.py")):
        h.update(str(p.relative_to(src)).encode())
        h.update(p.read_bytes())
    return {"package": __version__, "source_sha256": h.hexdigest()}


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingCheckpoint(f"required input not found: {path}")
    return p


class Run:
    """Bookkeeping for one subcommand invocation."""

    def __init__(self, subcommand: str, cfg, seed: int, out_dir: Path, data_root: str):
        self.subcommand = subcommand
        self.cfg = cfg
        self.seed = seed
        self.out_dir = out_dir
        self.data_root = data_root
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.extra: dict = {}
        self.start = time.time()
        out_dir.mkdir(parents=True, exist_ok=True)

    def input(self, path: str) -> Path:
        p = _require(path)
        self.inputs[str(path)] = substrate.file_digest(p)
        return p

    def output(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return path

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def finish(self) -> Path:
        outputs = {}
        for p in self.outputs:
            for q in [p, Path(str(p) + ".meta.txt"), p.with_suffix(".txt"), p.with_suffix(".png")]:
                if q.exists() and q.is_file():
                    outputs[str(q.relative_to(self.out_dir))] = substrate.file_digest(q)
        manifest = {
            "subcommand": self.subcommand,
            "config": cfgmod.as_dict(self.cfg),
            "seed": self.seed,
            "data_root": self.data_root,
            "code_version": code_version(),
            "inputs": self.inputs,
            "outputs": outputs,
            "wall_time_s": round(time.time() - self.start, 3),
            **self.extra,
        }
        return _write_json(self.out_dir / "manifest.json", manifest)


# -- subcommands ---------------------------------------------------------------

def cmd_train_vae(run: Run):
    c = run.cfg
    cfg = vae_mod.VaeConfig(m=c.m, n=c.n, beta=c.beta, gumbel_tau=c.gumbel_tau, epochs=c.epochs,
                            batch_size=c.batch_size, lr=c.lr, seed=run.seed, capacity=c.capacity)
    train = load_dataset(run.data_root, "train").subset(c.train_limit)
    val = load_dataset(run.data_root, "val").subset(c.val_limit)
    untrained = vae_mod.build_vae(cfg)
    baseline = vae_mod.evaluate_vae(untrained, val, cfg)
    model, history = vae_mod.train_vae(train, cfg, val, log_path=run.output(run.path("train_log.jsonl")))
    summary = {
        "untrained_val": baseline,
        "history": history,
        "final_val_recon": history[-1]["val_recon"] if history else baseline["recon"],
        "epoch1_val_recon": history[0]["val_recon"] if history else baseline["recon"],
        "param_count": substrate.count_params(model),
    }
    run.output(vae_mod.save_vae(model, cfg, run.path("model.ckpt"), {"seed": run.seed, "epochs": c.epochs}))
    return summary


def _train_classifier(run: Run, adversarial: bool):
    c = run.cfg
    tcfg = clf.TrainConfig(
        architecture=c.architecture, epochs=c.epochs, batch_size=c.batch_size, lr=c.lr,
        label_smoothing=c.label_smoothing, seed=run.seed,
        pgd_epsilon=getattr(c, "pgd_epsilon", 0.3), pgd_steps=getattr(c, "pgd_steps", 7),
        eps_warmup_epochs=getattr(c, "eps_warmup_epochs", 0.0),
    )
    train = load_dataset(run.data_root, "train").subset(c.train_limit)
    test = load_dataset(run.data_root, "test").subset(c.test_limit)
    t0 = time.time()
    model, history = clf.train_classifier(train, tcfg, adversarial=adversarial,
                                          log_path=run.output(run.path("train_log.jsonl")))
    train_seconds = time.time() - t0
    # only train-robust carries eval_* keys; the undefended variant is probed the same way
    attack = clf.PgdConfig(c.eval_epsilon, c.eval_steps) if hasattr(c, "eval_steps") else None
    summary = clf.eval_accuracy(model, test, attack, seed=substrate.derive_seed(run.seed, "eval.pgd"))
    summary.update({"history": history, "architecture": c.architecture, "adversarial": adversarial})
    run.output(clf.save_classifier(model, tcfg, run.path("model.ckpt"), {"seed": run.seed, "epochs": c.epochs}))
    # timing lives in the manifest so that summary.json stays reproducible
    run.extra["train_seconds"] = round(train_seconds, 3)
    return summary


def cmd_train_inference(run: Run):
    return _train_classifier(run, adversarial=False)


def cmd_train_robust(run: Run):
    return _train_classifier(run, adversarial=run.cfg.adversarial)


def cmd_fit_stats(run: Run):
    c = run.cfg
    vae, vcfg = vae_mod.load_vae(run.input(c.vae))
    train = load_dataset(run.data_root, "train").subset(c.train_limit)
    stats = latentstats.fit_class_stats(vae, train, sampled=c.sampled, tau=vcfg.gumbel_tau,
                                        seed=substrate.derive_seed(run.seed, "stats.noise"))
    run.output(stats.save(run.path("stats.json")))
    return {"counts": stats.counts.tolist(), "num_classes": stats.num_classes,
            "mean_sigma_z": float(stats.sigma_z.mean()), "mean_sigma_c": float(stats.sigma_c.mean())}


def _attack_config(c, seed: int, **over) -> atk.AttackConfig:
    kw = dict(
        lambda_org=c.lambda_org, lambda_noised=c.lambda_noised, lambda0=c.lambda0, lambda1=c.lambda1,
        lambda2=c.lambda2, norm_choice=c.norm_choice, param_budget=c.param_budget, epochs=c.epochs,
        batch_size=c.batch_size, lr=c.lr, seed=seed, target_mode=c.target_mode,
        linf_temperature=c.linf_temperature, train_limit=c.train_limit, eta_bound=c.eta_bound,
    )
    kw.update(over)
    return atk.AttackConfig(**kw)


def cmd_train_attack(run: Run):
    c = run.cfg
    acfg = _attack_config(c, run.seed)
    vae, _ = vae_mod.load_vae(run.input(c.vae))
    inference = clf.load_classifier(run.input(c.inference))
    stats = latentstats.ClassLatentStats.load(run.input(c.stats))
    train = load_dataset(run.data_root, "train")
    nets, history = atk.attack_train(vae, inference, stats, train, acfg, log_path=run.output(run.path("train_log.jsonl")))
    run.output(atk.save_networks(nets, acfg, run.path("attack.ckpt"), {"seed": run.seed}))
    # the test classifier is never loaded by this subcommand
    return {"history": history, "param_count": substrate.count_params(nets),
            "test_classifier_loaded": False, "test_classifier_gradient_queries": 0}


def _run_attack_eval(nets, acfg, vae, inference, stats, blackbox, test, batch_size, records_fh=None):
    records = []
    recon_correct = 0
    adv_images = []
    for start in range(0, len(test), batch_size):
        x = torch.tensor(test.images[start:start + batch_size])
        y = test.labels[start:start + batch_size]
        recs, x_adv = atk.attack_apply(nets, vae, inference, stats, x, y, acfg, start_index=start)
        before = blackbox.predict(x)
        after = blackbox.predict(x_adv)
        with torch.no_grad():
            recon_pred = blackbox.predict(vae.reconstruct(x))
        recon_correct += int((recon_pred.numpy() == y).sum())
        for r, b, a in zip(recs, before.tolist(), after.tolist()):
            r.set_test_predictions(b, a)
            if records_fh:
                records_fh.write(r.to_json() + "\n")
        records.extend(recs)
        adv_images.append(x_adv.numpy())
    return records, recon_correct / len(test), np.concatenate(adv_images)


def _attack_summary(records, recon_acc) -> dict:
    rate = metrics.success_rate(records)
    acc = metrics.binomial_rate(rate.n - rate.k, rate.n)
    mean = lambda key: float(np.mean([getattr(r, key) for r in records]))  # noqa: E731
    return {
        "n": len(records),
        "success_rate": rate.as_dict(),
        "accuracy_under_attack": acc.as_dict(),
        "reconstruction_only_accuracy": recon_acc,
        "mean_ssim": mean("ssim"),
        "mean_ssim_windowed": mean("ssim_windowed"),
        "mean_ssim_recon": mean("ssim_recon"),
        "mean_l2": mean("l2"),
        "mean_linf": mean("linf"),
        "pair_inequality_rate": float(np.mean([r.pair_inequality for r in records])),
        "inference_adv_matches_label_rate": float(np.mean([r.inference_pred_adv == r.original_label for r in records])),
        "test_clean_accuracy": float(np.mean([r.test_pred_before == r.original_label for r in records])),
    }


def cmd_evaluate(run: Run):
    c = run.cfg
    vae, _ = vae_mod.load_vae(run.input(c.vae))
    inference = clf.load_classifier(run.input(c.inference))
    robust = clf.load_classifier(run.input(c.robust))
    stats = latentstats.ClassLatentStats.load(run.input(c.stats))
    nets, acfg = atk.load_networks(run.input(c.attack))
    blackbox = clf.BlackBoxClassifier(robust)
    full_test = load_dataset(run.data_root, "test")
    test = full_test.subset(c.test_limit)

    with open(run.output(run.path("results.jsonl")), "w") as fh:
        records, recon_acc, adv = _run_attack_eval(nets, acfg, vae, inference, stats, blackbox, test, c.batch_size, fh)
    summary = _attack_summary(records, recon_acc)
    summary["attack_config"] = {"lambda_org": acfg.lambda_org, "lambda_noised": acfg.lambda_noised,
                                "param_budget": acfg.param_budget, "param_count": substrate.count_params(nets)}
    summary["test_classifier_gradient_queries"] = blackbox.gradient_queries

    # classifier accuracy block; white-box PGD here evaluates the defence itself, outside the attack
    pgd = clf.PgdConfig(c.pgd_epsilon, c.pgd_steps)
    robust_eval = clf.eval_accuracy(robust, test, pgd, seed=substrate.derive_seed(run.seed, "eval.pgd"))
    summary["accuracy_block"] = {
        "test_classifier_standard_acc": clf.eval_accuracy(robust, full_test)["standard_acc"],
        "test_classifier_robust_acc": robust_eval["robust_acc"],
        "robust_eval": {"epsilon": c.pgd_epsilon, "steps": c.pgd_steps, "n": len(test)},
        "inference_classifier_acc": clf.eval_accuracy(inference, full_test)["standard_acc"],
    }

    rows = min(c.grid_rows, len(records))
    tiles, caps = [], []
    for r, x_adv in zip(records[:rows], adv[:rows]):
        tiles += [test.images[r.index], x_adv]
        caps += [f"original {r.original_label} -> {r.test_pred_before}",
                 f"adversarial {r.original_label} -> {r.test_pred_after}"]
    run.output(emit_grid(np.stack(tiles), caps, run.path("grids/adversarial.pgm"), ncols=2, png=True))

    alphas = np.linspace(1.0, 0.0, c.interp_steps)
    latent, pixel, icaps = [], [], []
    pairs = min(c.interp_pairs, len(test) // 2)
    for k in range(pairs):
        x1, x2 = test.images[2 * k], test.images[2 * k + 1]
        for a in alphas:
            latent.append(atk.interpolate(vae, x1, x2, float(a), float(1 - a)).numpy())
            pixel.append(a * x1 + (1 - a) * x2)
            icaps.append(f"alpha={a:.2f} ({test.labels[2 * k]} -> {test.labels[2 * k + 1]})")
    if pairs:
        run.output(emit_grid(np.stack(latent), icaps, run.path("grids/interpolation.pgm"), ncols=len(alphas), png=True))
        run.output(emit_grid(np.stack(pixel), icaps, run.path("grids/interpolation_pixel.pgm"), ncols=len(alphas), png=True))
    return summary


def cmd_baseline_pgd(run: Run):
    c = run.cfg
    model = clf.load_classifier(run.input(c.classifier))
    test = load_dataset(run.data_root, "test").subset(c.test_limit)
    results = []
    for eps in [float(e) for e in c.epsilons.split(",") if e.strip()]:
        r = clf.eval_accuracy(model, test, clf.PgdConfig(eps, c.steps, random_start=c.random_start),
                              batch_size=c.batch_size, seed=substrate.derive_seed(run.seed, f"pgd.{eps}"))
        r["success_rate"] = 1.0 - r["robust_acc"]
        results.append(r)
    if c.role not in ("robust", "undefended"):
        raise ConfigError(f"role must be robust or undefended, got {c.role!r}")
    return {"results": results, "classifier": str(c.classifier), "classifier_role": c.role}


def cmd_ablate(run: Run):
    c = run.cfg
    vae, _ = vae_mod.load_vae(run.input(c.vae))
    inference = clf.load_classifier(run.input(c.inference))
    robust = clf.load_classifier(run.input(c.robust))
    stats = latentstats.ClassLatentStats.load(run.input(c.stats))
    blackbox = clf.BlackBoxClassifier(robust)
    test = load_dataset(run.data_root, "test").subset(c.test_limit)
    train = load_dataset(run.data_root, "train")
    grid = []
    for item in c.grid.split(","):
        a, b = item.split(":")
        grid.append((float(a), float(b)))
    budgets = [int(b) for b in c.budgets.split(",")]
    rows = []
    for budget in budgets:
        for a, b in grid:
            acfg = _attack_config(c, run.seed, lambda_org=a, lambda_noised=b, param_budget=budget)
            tag = f"a{a:g}_b{b:g}_p{budget}"
            run.path("points").mkdir(exist_ok=True)
            nets, history = atk.attack_train(vae, inference, stats, train, acfg,
                                             log_path=run.output(run.path(f"points/{tag}.train_log.jsonl")))
            run.output(atk.save_networks(nets, acfg, run.path(f"points/{tag}.ckpt"), {"seed": run.seed}))
            records, recon_acc, _ = _run_attack_eval(nets, acfg, vae, inference, stats, blackbox, test, c.eval_batch_size)
            s = _attack_summary(records, recon_acc)
            rows.append({
                "alpha": a, "beta": b, "budget": budget, "param_count": substrate.count_params(nets),
                "accuracy": s["accuracy_under_attack"], "success_rate": s["success_rate"],
                "mean_ssim": s["mean_ssim"], "final_train_loss": history[-1] if history else None,
            })
            log.info("ablate %s: accuracy %.3f", tag, s["accuracy_under_attack"]["value"])
    table = report_mod._md_table(
        [{**r, "accuracy": f"{100 * r['accuracy']['value']:.1f}%"} for r in rows],
        ["alpha", "beta", "budget", "param_count", "accuracy", "mean_ssim"],
    )
    run.output(run.path("ablation.md"))
    run.path("ablation.md").write_text(table + "\n")
    return {"rows": rows, "test_classifier_gradient_queries": blackbox.gradient_queries, "n": len(test)}


def cmd_report(run: Run, dirs: list[str]):
    runs = report_mod.load_runs(dirs)
    tables = report_mod.build_tables(runs)
    run.output(_write_json(run.path("report.json"), tables))
    run.path("report.md").write_text(report_mod.render_markdown(tables))
    run.output(run.path("report.md"))
    for r in runs:
        run.inputs[str(Path(r["dir"]) / "manifest.json")] = substrate.file_digest(Path(r["dir"]) / "manifest.json")
    return {"runs": len(runs), "tables": {k: len(v) for k, v in tables.items()}}


COMMANDS = {
    "train-vae": cmd_train_vae,
    "train-inference": cmd_train_inference,
    "train-robust": cmd_train_robust,
    "fit-stats": cmd_fit_stats,
    "train-attack": cmd_train_attack,
    "evaluate": cmd_evaluate,
    "baseline-pgd": cmd_baseline_pgd,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent_poison", description=__doc__)
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("runs", nargs="*", help="run directories (report only)")
    parser.add_argument("--config", default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--data-root", default=DEFAULT_DATA_ROOT)
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out_dir = Path(args.out_dir or f"runs/{args.subcommand}")
    try:
        cfg = cfgmod.resolve(args.subcommand, cfgmod.read_config_file(args.config), args.override)
        torch.use_deterministic_algorithms(True)
        substrate.seed_everything(args.seed)
        r = Run(args.subcommand, cfg, args.seed, out_dir, args.data_root)
        if args.subcommand == "report":
            dirs = list(args.runs) + [d for d in cfg.runs.split(",") if d.strip()]
            summary = cmd_report(r, dirs)
        else:
            if args.runs:
                raise ConfigError("positional run directories are only accepted by report")
            summary = COMMANDS[args.subcommand](r)
        r.output(_write_json(r.path("summary.json"), summary))
        r.finish()
        print(json.dumps({"status": "ok", "out_dir": str(out_dir)}))
        return 0
    except (LatentPoisonError, FileNotFoundError, ValueError) as exc:
        err = {"status": "error", "error": type(exc).__name__, "message": str(exc), "subcommand": args.subcommand}
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(out_dir / "error.json", err)
        except OSError:
            pass
        print(json.dumps(err), file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(run())
