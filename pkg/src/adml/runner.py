"""Experiment orchestration: stages, artifact layout, CSV reports.

Every run writes a self-describing output directory:

    out/
      resolved.cfg      fully expanded configuration
      versions.txt      interpreter/library versions and the seed list
      metrics.csv       one row per (seed, phase); fixed schema
      aggregate.csv     mean/std over seeds per phase
      timings.csv       measured wall-clock (not part of the deterministic set)
      seed_<N>/         datasets, checkpoints, shift reports, certificates

metrics.csv and aggregate.csv are byte-deterministic for a given config and
seed list: rows are emitted in fixed order and the wallclock column is the
constant "NA" (real timings live in timings.csv).
"""

from __future__ import annotations

import os
import sys
import time
import traceback
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackMethod
from .certification import (
    anchor_distance_stats,
    certify_eps_robust,
    empirical_event_frequency,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_hash, serialize_config
from .evaluation import AnchorSet, benign_metrics, embedding_shift_report, robust_metrics
from .model import init_adam_state, lipschitz_upper_bound
from .numerics import Norm, SeededRng
from .synth import generate_mixture, load_dataset, save_dataset
from .training import Formulation, TrainConfig, train

__all__ = ["run_experiment", "COMMANDS", "CSV_HEADER"]

COMMANDS = (
    "gen-data",
    "train",
    "eval",
    "attack",
    "certify",
    "sweep-rate",
    "sweep-target",
    "sweep-attack",
)

CSV_HEADER = (
    "experiment_id,seed,phase,norm,epsilon,attack_rate,formulation,"
    "perturb_target,r_at_1,map_at_r,attack_success_rate,mean_shift,wallclock_s"
)

SWEEP_RATES = (0.1, 0.25, 0.5, 0.75, 1.0)


def _f(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class MetricsRow:
    experiment_id: str
    seed: int
    phase: str
    norm: str
    epsilon: str
    attack_rate: str
    formulation: str
    perturb_target: str
    r_at_1: float
    map_at_r: float
    attack_success_rate: float
    mean_shift: float

    def render(self) -> str:
        return ",".join(
            [
                self.experiment_id,
                str(self.seed),
                self.phase,
                self.norm,
                self.epsilon,
                self.attack_rate,
                self.formulation,
                self.perturb_target,
                _f(self.r_at_1),
                _f(self.map_at_r),
                _f(self.attack_success_rate),
                _f(self.mean_shift),
                "NA",
            ]
        )

    def group_key(self):
        return (self.phase, self.norm, self.epsilon, self.attack_rate,
                self.formulation, self.perturb_target)


class _SeedContext:
    """Lazy per-seed artifacts: datasets and trained model variants."""

    def __init__(self, cfg: ExperimentConfig, seed: int, seed_dir: Path, timings: list):
        self.cfg = cfg
        self.seed = seed
        self.dir = seed_dir
        self.timings = timings
        self._data = None
        self._models: dict[str, tuple] = {}

    def datasets(self):
        if self._data is None:
            train_path = self.dir / "train.admlds"
            test_path = self.dir / "test.admlds"
            if train_path.exists() and test_path.exists():
                self._data = (load_dataset(train_path), load_dataset(test_path))
            else:
                t0 = time.perf_counter()
                train_ds, test_ds = generate_mixture(self.cfg.mixture_config(self.seed))
                save_dataset(train_ds, train_path)
                save_dataset(test_ds, test_path)
                self.timings.append((self.seed, "gen-data", time.perf_counter() - t0))
                self._data = (train_ds, test_ds)
        return self._data

    def model(self, variant: str, tc: TrainConfig):
        """Train (or load) the checkpoint for one training-config variant."""
        if variant in self._models:
            return self._models[variant]
        path = self.dir / f"checkpoint-{variant}.admlck"
        dims = (self.cfg["data.input_dim"], *tc.hidden_dims, tc.embedding_dim)
        if path.exists():
            params, _, _ = load_checkpoint(path, expect_layer_dims=dims)
            self._models[variant] = (params, None)
            return self._models[variant]
        train_ds, _ = self.datasets()
        t0 = time.perf_counter()
        params, report = train(train_ds, tc)
        self.timings.append((self.seed, f"train-{variant}", time.perf_counter() - t0))
        state = init_adam_state(
            params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2,
            eps_hat=tc.eps_hat, weight_decay=tc.weight_decay,
        )
        meta = {
            "seed": self.seed,
            "variant": variant,
            "config_hash": config_hash(self.cfg),
            "epochs_run": report.epochs_run,
            "best_epoch": report.best_epoch,
        }
        save_checkpoint(params, state, meta, path)
        self._models[variant] = (params, report)
        return self._models[variant]


def _variant_name(tc: TrainConfig) -> str:
    if tc.formulation is Formulation.NATURAL:
        return "natural"
    name = f"{tc.formulation.value}-rate{tc.attack_rate:g}-{tc.perturb_target.name.lower()}"
    return name


def _model_columns(tc: TrainConfig):
    if tc.formulation is Formulation.NATURAL:
        return "", "natural", ""
    return (
        _f(tc.attack_rate),
        tc.formulation.value,
        tc.perturb_target.name.lower(),
    )


def _write_shift_report(path: Path, records):
    d = len(records[0].benign_embedding)
    cols = ["index", "label", "shift", "nn_correct"]
    cols += [f"benign_e{j}" for j in range(d)] + [f"adv_e{j}" for j in range(d)]
    lines = [",".join(cols)]
    for r in records:
        parts = [str(r.index), str(r.label), _f(r.shift), str(int(r.nn_correct))]
        parts += [_f(v) for v in r.benign_embedding]
        parts += [_f(v) for v in r.adversarial_embedding]
        lines.append(",".join(parts))
    path.write_text("\n".join(lines) + "\n")


def _eval_model(ctx: _SeedContext, exp_id: str, tc: TrainConfig, variant: str,
                benign: bool, attacks, write_shift: bool):
    """Benign and adversarial metric rows for one trained variant."""
    cfg = ctx.cfg
    params, _ = ctx.model(variant, tc)
    _, test_ds = ctx.datasets()
    rate, formulation, target = _model_columns(tc)
    rows = []
    if benign:
        t0 = time.perf_counter()
        rep = benign_metrics(params, test_ds)
        ctx.timings.append((ctx.seed, f"eval-benign-{variant}", time.perf_counter() - t0))
        rows.append(
            MetricsRow(exp_id, ctx.seed, "benign", "", "", rate, formulation, target,
                       rep.r_at_1, rep.map_at_r, rep.attack_success_rate, rep.mean_shift)
        )
    for method in attacks:
        atk = cfg.eval_attack(method)
        rng = SeededRng(ctx.seed).derive(31, zlib.crc32(variant.encode()))
        t0 = time.perf_counter()
        rep = robust_metrics(params, test_ds, atk, rng)
        ctx.timings.append(
            (ctx.seed, f"eval-{method.value}-{variant}", time.perf_counter() - t0)
        )
        rows.append(
            MetricsRow(exp_id, ctx.seed, method.value, atk.norm.value, _f(atk.epsilon),
                       rate, formulation, target, rep.r_at_1, rep.map_at_r,
                       rep.attack_success_rate, rep.mean_shift)
        )
        if write_shift:
            records = embedding_shift_report(params, test_ds, atk, rng)
            _write_shift_report(
                ctx.dir / f"shift_{variant}_{method.value}.csv", records
            )
    return rows


def _certify_seed(ctx: _SeedContext, exp_id: str):
    cfg = ctx.cfg
    settings = cfg.certify_settings()
    tc = cfg.train_config(ctx.seed)
    variant = _variant_name(tc)
    params, _ = ctx.model(variant, tc)
    train_ds, test_ds = ctx.datasets()
    t0 = time.perf_counter()
    _, l_norm = lipschitz_upper_bound(params, train_ds.x, settings.spectral_iters)
    anchors = AnchorSet.from_dataset(train_ds)
    eval_eps = cfg["attack.epsilon"]
    norm = cfg["attack.norm"]
    lines = ["point_index,delta_separation,lipschitz_bound_used,epsilon_certified,certified"]
    n_certified = 0
    eps_values = []
    n = min(settings.n_points, len(test_ds))
    for i in range(n):
        cert = certify_eps_robust(
            params, test_ds.x[i], anchors, epsilon=eval_eps, input_norm=norm,
            lipschitz_l2=l_norm, safety_factor=settings.safety_factor, point_index=i,
        )
        n_certified += cert.certified
        if cert.epsilon_certified > 0:
            eps_values.append(cert.epsilon_certified)
        lines.append(
            f"{i},{_f(cert.delta_separation)},{_f(cert.lipschitz_bound_used)},"
            f"{_f(cert.epsilon_certified)},{int(cert.certified)}"
        )
    (ctx.dir / "certificates.csv").write_text("\n".join(lines) + "\n")
    mix = cfg.mixture_config(ctx.seed)
    a_pos = train_ds.x[train_ds.y == 0][0]
    a_neg = train_ds.x[train_ds.y == 1][0]
    freq = empirical_event_frequency(
        params, mix, a_pos, a_neg, settings.event_samples,
        SeededRng(ctx.seed).derive(77), positive_class=0,
    )
    beta_pos, _ = anchor_distance_stats(
        params, mix, a_pos, settings.event_samples, SeededRng(ctx.seed).derive(78)
    )
    ctx.timings.append((ctx.seed, "certify", time.perf_counter() - t0))
    summary = (
        f"{exp_id},{ctx.seed},{n},{n_certified},"
        f"{_f(min(eps_values) if eps_values else 0.0)},"
        f"{_f(float(np.mean(eps_values)) if eps_values else 0.0)},"
        f"{_f(freq)},{_f(beta_pos)}"
    )
    return summary


def _seed_work(cfg: ExperimentConfig, command: str, seed: int, out_dir: Path,
               timings: list):
    exp_id = f"{command}-{config_hash(cfg)[:8]}"
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    ctx = _SeedContext(cfg, seed, seed_dir, timings)
    rows: list[MetricsRow] = []
    certify_rows: list[str] = []

    if command == "gen-data":
        ctx.datasets()
    elif command == "train":
        tc = cfg.train_config(seed)
        rows += _eval_model(ctx, exp_id, tc, _variant_name(tc), benign=True,
                            attacks=(), write_shift=False)
    elif command == "eval":
        tc = cfg.train_config(seed)
        rows += _eval_model(ctx, exp_id, tc, _variant_name(tc), benign=True,
                            attacks=(), write_shift=False)
    elif command == "attack":
        tc = cfg.train_config(seed)
        rows += _eval_model(ctx, exp_id, tc, _variant_name(tc), benign=True,
                            attacks=cfg.eval_attacks, write_shift=True)
    elif command == "certify":
        certify_rows.append(_certify_seed(ctx, exp_id))
    elif command == "sweep-rate":
        tc_nat = cfg.train_config(seed, formulation=Formulation.NATURAL)
        rows += _eval_model(ctx, exp_id, tc_nat, "natural", benign=True,
                            attacks=cfg.eval_attacks, write_shift=False)
        for rate in SWEEP_RATES:
            tc = cfg.train_config(seed, formulation=Formulation.F2, attack_rate=rate)
            rows += _eval_model(ctx, exp_id, tc, _variant_name(tc), benign=True,
                                attacks=cfg.eval_attacks, write_shift=False)
    elif command == "sweep-target":
        from .losses import PerturbTarget

        tc_nat = cfg.train_config(seed, formulation=Formulation.NATURAL)
        rows += _eval_model(ctx, exp_id, tc_nat, "natural", benign=True,
                            attacks=cfg.eval_attacks, write_shift=False)
        for target in (PerturbTarget.POSITIVE, PerturbTarget.NEGATIVE, PerturbTarget.ANCHOR):
            tc = cfg.train_config(seed, formulation=Formulation.F2, perturb_target=target)
            rows += _eval_model(ctx, exp_id, tc, _variant_name(tc), benign=True,
                                attacks=cfg.eval_attacks, write_shift=False)
    elif command == "sweep-attack":
        methods = (AttackMethod.FGSM, AttackMethod.PGD, AttackMethod.CW)
        tc_nat = cfg.train_config(seed, formulation=Formulation.NATURAL)
        rows += _eval_model(ctx, exp_id, tc_nat, "natural", benign=True,
                            attacks=methods, write_shift=False)
        tc_rob = cfg.train_config(seed, formulation=Formulation.F2)
        rows += _eval_model(ctx, exp_id, tc_rob, _variant_name(tc_rob), benign=True,
                            attacks=methods, write_shift=False)
    else:
        raise ValueError(f"unknown command {command!r}")
    return rows, certify_rows


def _write_aggregate(path: Path, rows: list[MetricsRow]):
    groups: dict[tuple, list[MetricsRow]] = {}
    order: list[tuple] = []
    for row in rows:
        key = row.group_key()
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    lines = [
        "phase,norm,epsilon,attack_rate,formulation,perturb_target,n_seeds,"
        "r_at_1_mean,r_at_1_std,map_at_r_mean,map_at_r_std,"
        "attack_success_rate_mean,attack_success_rate_std,mean_shift_mean,mean_shift_std"
    ]
    for key in order:
        members = groups[key]

        def stats(field):
            vals = np.array([getattr(m, field) for m in members])
            return _f(float(np.mean(vals))), _f(float(np.std(vals)))

        parts = list(key) + [str(len(members))]
        for field in ("r_at_1", "map_at_r", "attack_success_rate", "mean_shift"):
            parts += list(stats(field))
        lines.append(",".join(parts))
    path.write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, command: str, out_dir,
                   seeds=None, threads=None) -> int:
    """Execute one subcommand pipeline; returns a process exit status."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = tuple(seeds) if seeds else cfg.seeds
    if threads is None:
        env = os.environ.get("ADML_THREADS")
        threads = int(env) if env else cfg.threads
    threads = max(1, int(threads))

    (out_dir / "resolved.cfg").write_text(serialize_config(cfg))
    (out_dir / "versions.txt").write_text(
        f"adml {__version__}\npython {sys.version.split()[0]}\n"
        f"numpy {np.__version__}\nseeds {','.join(str(s) for s in seeds)}\n"
        f"command {command}\n"
    )
    failed_marker = out_dir / "FAILED"
    if failed_marker.exists():
        failed_marker.unlink()

    timings_per_seed = {s: [] for s in seeds}

    def work(seed):
        return _seed_work(cfg, command, seed, out_dir, timings_per_seed[seed])

    try:
        if threads == 1 or len(seeds) == 1:
            results = [work(s) for s in seeds]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, seeds))
    except Exception:
        failed_marker.write_text(traceback.format_exc())
        sys.stderr.write(traceback.format_exc())
        return 1

    rows = [row for seed_rows, _ in results for row in seed_rows]
    cert_rows = [row for _, seed_certs in results for row in seed_certs]
    if rows:
        (out_dir / "metrics.csv").write_text(
            "\n".join([CSV_HEADER] + [r.render() for r in rows]) + "\n"
        )
        _write_aggregate(out_dir / "aggregate.csv", rows)
    if cert_rows:
        header = (
            "experiment_id,seed,n_points,n_certified,eps_certified_min,"
            "eps_certified_mean,event_frequency,beta_positive"
        )
        (out_dir / "certify_summary.csv").write_text(
            "\n".join([header] + cert_rows) + "\n"
        )
    timing_lines = ["seed,stage,seconds"]
    for seed in seeds:
        for s, stage, secs in timings_per_seed[seed]:
            timing_lines.append(f"{s},{stage},{secs:.3f}")
    (out_dir / "timings.csv").write_text("\n".join(timing_lines) + "\n")
    return 0
