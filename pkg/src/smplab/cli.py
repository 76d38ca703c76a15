"""Command-line entry point: ``smp <command> [--config FILE] [--set section.key=value ...]``.

Commands: gen-data, train-prior, train-policy, eval, sample, show-config.
Exit codes: 0 success, 2 configuration or input error, 3 training or
simulation failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .diffusion import NULL, Denoiser, PriorConfig, StyleDirective, sample_reverse, train_prior
from .env import EnvParams
from .errors import ConfigError, InputError, SimulationError, SmpError, TrainingError
from .evaluation import (
    ablation_ensemble_vs_random, classify_style, normalized_task_return, prior_fidelity,
    imitation_error, reward_discrimination, speed_sweep, svg_line_plot,
)
from .gait import held_out_split, load_dataset, preset_dataset, save_dataset
from .ppo import (
    PpoConfig, evaluate_policy, load_policy, make_run, resume_run, save_run, train_policy, warm_running_means,
    write_metrics,
)
from .prior import SmpPrior, gsi_initializer

log = logging.getLogger("smplab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# ---------------------------------------------------------------------------
# helpers


def _out_path(cfg: RunConfig, section: str, default_name: str) -> Path:
    given = cfg[section].get("out", "")
    path = Path(given) if given else cfg.out_dir / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _echo(cfg: RunConfig, directory: Path) -> None:
    """Resolved config and seed next to the artifacts."""
    directory.mkdir(parents=True, exist_ok=True)
    cfg.write(directory / "config.resolved.ini")
    (directory / "seed.txt").write_text(f"{cfg.seed}\n")


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _require(value: str, what: str) -> str:
    if not value:
        raise ConfigError(f"{what} is required")
    return value


def _style_index(model: Denoiser, name: str) -> int:
    if not name:
        return NULL
    if name not in model.style_names:
        raise ConfigError(f"style {name!r} not in prior styles {model.style_names}")
    return model.style_names.index(name)


def directive_from(section: dict, model: Denoiser) -> StyleDirective:
    """StyleDirective from ``label``/``w_cfg`` or ``compose = a+b`` with ``mask``."""
    if section.get("compose"):
        parts = section["compose"].split("+")
        if len(parts) != 2:
            raise ConfigError("compose must look like style_a+style_b")
        a, b = (_style_index(model, p.strip()) for p in parts)
        return StyleDirective(compose=(a, b), mask=section.get("mask", "limb1"), w_cfg=section.get("w_cfg", 1.0))
    return StyleDirective(label=_style_index(model, section.get("label", "")),
                          w_cfg=section.get("w_cfg", 1.0))


def _dataset_or_preset(path: str, seed: int):
    """A dataset file, or ``preset:<name>`` to regenerate one in memory."""
    if path.startswith("preset:"):
        return preset_dataset(path.split(":", 1)[1], seed)
    return load_dataset(_require(path, "dataset path"))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> None:
    d = cfg["data"]
    ds = preset_dataset(d["preset"], cfg.seed, H=d["H"])
    path = _out_path(cfg, "data", "dataset.smpd")
    save_dataset(ds, path)
    _echo(cfg, path.parent)
    rows = [(s, sum(c.style == s for c in ds.clips), int(np.sum(ds.labels == k)))
            for k, s in enumerate(ds.styles)]
    _write_rows(path.parent / "metrics.csv", ["style", "clips", "windows"], rows)
    print(f"wrote {path} ({ds.n_windows} windows)")


def cmd_train_prior(cfg: RunConfig) -> None:
    p = cfg["prior"]
    ds = _dataset_or_preset(p["dataset"], cfg.seed)
    windows, labels = ds.windows, ds.labels
    if p["holdout"] > 0:
        train, _ = held_out_split(ds, p["holdout"])
        windows, labels = windows[train], labels[train]
    pc = PriorConfig(steps=p["steps"], batch=p["batch"], lr=p["lr"], ema_decay=p["ema_decay"],
                     cond_dropout=p["cond_dropout"], N=p["N"], hidden=p["hidden"], seed=cfg.seed,
                     log_every=p["log_every"])
    model, lg = train_prior(windows, labels if p["conditional"] else None, pc,
                            ds.styles if p["conditional"] else (),
                            progress=lambda s, l: log.info("step %d loss %.4f", s, l))
    path = _out_path(cfg, "prior", "prior.smpl")
    model.save(path)
    _echo(cfg, path.parent)
    _write_rows(path.parent / "metrics.csv", ["step", "loss"], zip(lg.steps, lg.losses))
    svg_line_plot(path.parent / "loss.svg", {"loss": (np.array(lg.steps), np.array(lg.losses))},
                  "denoising loss", "step", "loss")
    print(f"wrote {path} (final loss {lg.losses[-1]:.4f})")


def load_prior(path: str, section: dict) -> SmpPrior:
    model = Denoiser.load(_require(path, "prior checkpoint"))
    return SmpPrior(model, directive_from(section, model), w_s=section.get("w_s", 1.0),
                    decay=section.get("mu_decay", 0.999), mode=section.get("reward_mode", "ensemble"))


def policy_config(cfg: RunConfig) -> PpoConfig:
    p = cfg["policy"]
    return PpoConfig(gamma=p["gamma"], lam=p["lam"], clip=p["clip"], epochs=p["epochs"],
                     minibatch=p["minibatch"], lr=p["lr"], n_envs=p["n_envs"], horizon=p["horizon"],
                     w_prior=p["w_prior"], w_g=p["w_g"], entropy_coef=p["entropy_coef"],
                     hidden=p["hidden"], init_log_std=p["init_log_std"], iterations=p["iterations"],
                     seed=cfg.seed, gsi=p["gsi"])


def cmd_train_policy(cfg: RunConfig) -> None:
    p = cfg["policy"]
    if p["dataset"]:
        # policy training sees motion data only through the frozen prior
        raise ConfigError("[policy] dataset must be empty: policy training never reads motion data"
                          + (" and a prior is configured" if p["prior"] else ""))
    pc = policy_config(cfg)
    pc.validate()
    if p["task"] == "imitation" and pc.w_prior == 0:
        raise ConfigError("imitation needs w_prior > 0 and a prior checkpoint")
    # the prior file is not even opened when its weight is zero
    prior = load_prior(p["prior"], p) if pc.w_prior > 0 else None
    path = _out_path(cfg, "policy", "policy.smpl")
    _echo(cfg, path.parent)
    run = resume_run(p["resume"], prior) if p["resume"] else make_run(pc, p["task"], prior)
    every = max(p["checkpoint_every"], 1)
    while run.iteration < pc.iterations:
        train_policy(run, min(pc.iterations, (run.iteration // every + 1) * every),
                     progress=lambda r: log.info("iter %d task %.3f smp %.3f", r["iter"],
                                                 r["task_return"], r["mean_r_smp"]))
        save_run(run, path)
    write_metrics(run.metrics, path.parent / "metrics.csv")
    if run.metrics:
        it = np.array([r["iter"] for r in run.metrics])
        svg_line_plot(path.parent / "learning_curve.svg",
                      {"task return": (it, np.array([r["task_return"] for r in run.metrics])),
                       "prior reward": (it, np.array([r["mean_r_smp"] for r in run.metrics]))},
                      "policy training", "iteration", "mean reward")
        last = run.metrics[-1]
        print(f"wrote {path} (iter {run.iteration}, task {last['task_return']:.3f}, "
              f"smp {last['mean_r_smp']:.3f})")


def eval_prior(cfg: RunConfig, rng) -> dict:
    e = cfg["eval"]
    model = Denoiser.load(_require(e["prior"], "[eval] prior"))
    ds = _dataset_or_preset(e["dataset"], cfg.seed)
    _, held = held_out_split(ds, e["holdout"])
    return prior_fidelity(model, ds.windows[held], rng, e["n_samples"], ds.labels[held], e["repeats"])


def eval_reward(cfg: RunConfig, rng) -> dict:
    e = cfg["eval"]
    prior = load_prior(e["prior"], {})
    ds = _dataset_or_preset(e["dataset"], cfg.seed)
    pick = rng.choice(ds.n_windows, min(e["n_samples"], ds.n_windows), replace=False)
    z = prior.normalize(ds.windows[np.sort(pick)])
    warm_running_means(prior, PpoConfig(seed=cfg.seed))
    return reward_discrimination(prior, z, rng)


def eval_ablation(cfg: RunConfig, rng) -> dict:
    e = cfg["eval"]
    model = Denoiser.load(_require(e["prior"], "[eval] prior"))
    ds = _dataset_or_preset(e["dataset"], cfg.seed)
    pick = np.sort(rng.choice(ds.n_windows, min(e["n_windows"], ds.n_windows), replace=False))
    ens, rnd = SmpPrior(model), SmpPrior(model, mode="random")
    z = ens.normalize(ds.windows[pick])
    for p in (ens, rnd):
        warm_running_means(p, PpoConfig(seed=cfg.seed))
    rep = ablation_ensemble_vs_random(ens, rnd, z, e["trials"], rng)
    return {"fraction_ensemble_lower": rep["fraction_ensemble_lower"],
            "ensemble_std_mean": float(rep["ensemble_std"].mean()),
            "random_std_mean": float(rep["random_std"].mean())}


def _eval_initializer(e: dict):
    """GSI from the eval prior under the eval section's style directive, if a prior is given."""
    return gsi_initializer(load_prior(e["prior"], e)) if e["prior"] else None


def eval_policy(cfg: RunConfig, rng) -> dict:
    e = cfg["eval"]
    man, policy, _, _ = load_policy(_require(e["policy"], "[eval] policy"))
    task = man["task"]
    roll = evaluate_policy(policy, task, e["episodes"], e["steps"], rng, initializer=_eval_initializer(e))
    out = {"task": task, "normalized_task_return": normalized_task_return(roll.r_task)}
    verdicts = [classify_style(roll.states.q[:, k], EnvParams().dt).limb_styles for k in range(e["episodes"])]
    for k, name in enumerate(("limb1", "limb2")):
        styles = [v[k] for v in verdicts]
        out[f"{name}_style"] = max(set(styles), key=styles.count)
    if e["compose"]:
        a, b = (p.strip() for p in e["compose"].split("+"))
        want = (a, b) if e["mask"] == "limb1" else (b, a)
        out["compose_match_fraction"] = float(np.mean([v == want for v in verdicts]))
    if e["dataset"]:
        # tracking of the dataset's first clip, from starts spread over the clip
        ds = _dataset_or_preset(e["dataset"], cfg.seed)
        rep = imitation_error(policy, task, ds.clips[0].states, n_starts=e["episodes"], H=ds.H)
        out["dtw_error_mean"] = rep["mean"]
        out["dtw_error_max"] = rep["max"]
    return out


def eval_speed_sweep(cfg: RunConfig, rng) -> dict:
    e = cfg["eval"]
    man, policy, _, _ = load_policy(_require(e["policy"], "[eval] policy"))
    if man["task"] != "target_speed":
        raise ConfigError("speed_sweep needs a target_speed policy")
    rep = speed_sweep(policy, e["speeds"], rng, steps=e["steps"], initializer=_eval_initializer(e))
    out = {"max_relative_error": rep["max_relative_error"], "freq_pearson": rep["freq_pearson"]}
    for v, m, f in zip(rep["speeds"], rep["measured"], rep["frequency"]):
        out[f"speed_{v:g}"] = float(m)
        out[f"freq_{v:g}"] = float(f)
    return out


EVAL_KINDS = {"prior": eval_prior, "reward": eval_reward, "ablation": eval_ablation, "policy": eval_policy,
              "speed_sweep": eval_speed_sweep}


def cmd_eval(cfg: RunConfig) -> None:
    kind = cfg["eval"]["kind"]
    if kind not in EVAL_KINDS:
        raise ConfigError(f"unknown eval kind {kind!r}; choose from {sorted(EVAL_KINDS)}")
    rng = np.random.default_rng(cfg.seed)
    report = EVAL_KINDS[kind](cfg, rng)
    path = _out_path(cfg, "eval", f"eval_{kind}.csv")
    _echo(cfg, path.parent)
    _write_rows(path, ["metric", "value"], report.items())
    for k, v in report.items():
        print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")


def cmd_sample(cfg: RunConfig) -> None:
    s = cfg["sample"]
    model = Denoiser.load(_require(s["prior"], "[sample] prior"))
    z = sample_reverse(model, directive_from(s, model), np.random.default_rng(cfg.seed), s["n"])
    w = model.denormalize(z)
    path = _out_path(cfg, "sample", "samples.csv")
    _echo(cfg, path.parent)
    H, D = model.H, model.D
    header = ["sample", "frame"] + [f"f{j}" for j in range(D)]
    _write_rows(path, header, ([k, t, *map(float, w[k, t])] for k in range(s["n"]) for t in range(H)))
    print(f"wrote {path} ({s['n']} windows)")


def cmd_show_config(cfg: RunConfig) -> None:
    sys.stdout.write(cfg.to_ini())


COMMANDS = {"gen-data": cmd_gen_data, "train-prior": cmd_train_prior,
            "train-policy": cmd_train_policy, "eval": cmd_eval, "sample": cmd_sample,
            "show-config": cmd_show_config}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--verbose", "-v", action="store_true")
    parser = argparse.ArgumentParser(prog="smp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, SimulationError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except SmpError as e:
        print(f"failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
