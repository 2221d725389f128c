"""Command-line entry point: ``imcbn {pretrain,deploy,analyze,cost}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
Set ``IMCBN_THREADS`` to run deployment seeds on a thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import analysis, cost, io
from .config import ConfigError, ExperimentConfig, _resolve, load_config
from .data import make_synthetic
from .device import Fractional
from .tensor import ShapeError
from .tune import DivergenceError, _write_log, bn_adapt, bn_finetune, evaluate, pretrain
from .xbar import SolverError, deploy_network

log = logging.getLogger("imcbn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (DivergenceError, SolverError, analysis.DegenerateCloud, FloatingPointError)

MODE_ORDER = {"none": 0, "adapt": 1, "finetune": 2}
BASE_COLUMNS = ["seed", "config_index", "mode", "device", "sigma", "T", "parasitics", "accuracy"]


def result_columns(conv_names: list[str]) -> list[str]:
    return BASE_COLUMNS + [f"pc2_{n}" for n in conv_names] + [f"pc2_proj_{n}" for n in conv_names]


def load_data(cfg: ExperimentConfig, base: Path):
    if cfg.dataset.synthetic is not None:
        return make_synthetic(cfg.dataset.synthetic.build())
    root = _resolve(base, cfg.dataset.path)
    xtr, ytr = io.load_dataset(root, "train")
    xte, yte = io.load_dataset(root, "test")
    return xtr, ytr, xte, yte


def _prepare_out(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg, base = load_config(args.config)
    spec = cfg.network_spec(base)
    xtr, ytr, xte, yte = load_data(cfg, base)
    if tuple(xtr.shape[1:]) != spec.input_shape:
        raise ConfigError(f"dataset images {xtr.shape[1:]} do not match network input {spec.input_shape}")
    p = cfg.pretrain
    out = Path(args.out)
    model = pretrain(spec, xtr, ytr, epochs=p.epochs, lr=p.lr, seed=p.seed, batch_size=p.batch_size,
                     momentum=p.momentum, test=(xte, yte))
    _prepare_out(out)
    io.save_checkpoint(model, out)
    _write_log(out / "train_log.csv", model.history)
    acc = model.history[-1][3]
    print(f"pretrained {cfg.network}: test accuracy {acc:.4f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# deploy
# ---------------------------------------------------------------------------

def sweep_points(cfg: ExperimentConfig, device):
    """List of ``(config_index, device, drift_t)`` sweep points."""
    if cfg.sweep is None:
        return [(0, device, cfg.noise.drift_t)]
    if cfg.sweep.sigma is not None:
        return [(i, device.with_sigma(s), cfg.noise.drift_t) for i, s in enumerate(cfg.sweep.sigma)]
    return [(i, device, t) for i, t in enumerate(cfg.sweep.T)]


def run_deployment(cfg: ExperimentConfig, model, data, seed: int, point, out: Optional[Path] = None) -> list[dict]:
    """Deploy once and evaluate every requested tuning mode."""
    idx, device, drift_t = point
    xtr, ytr, xte, yte = data
    noise = cfg.noise_config(seed, drift_t)
    if cfg.sweep is not None and cfg.sweep.sigma is not None and cfg.noise.read_noise is None:
        noise = type(noise)(**{**noise.__dict__, "read_noise": True})
    deployed, layers = deploy_network(model, device, cfg.quant_spec(), cfg.xbar_config(), noise, cfg.act_quant)
    t = noise.drift_t if noise.drift else 1.0
    t0 = noise.drift_t0
    pcs = {n: analysis.pca2(l.w_ideal, l.w_ni).pc2 for n, l in layers.items()}
    proj = {n: analysis.pc2_projected(v, t, t0, device.nu) if noise.drift else v for n, v in pcs.items()}
    if out is not None and cfg.dump:
        _dump(out / "dump" / f"seed{seed}_cfg{idx}", layers, device, noise)
    sigma = device.read_noise.sigma if isinstance(device.read_noise, Fractional) else ""
    rows = []
    for mode in cfg.tuning.modes:
        m = deployed.copy()
        if mode == "adapt":
            bn_adapt(m, xtr, cfg.adapt_config())
        elif mode == "finetune":
            logp = None
            if out is not None:
                (out / "logs").mkdir(exist_ok=True)
                logp = out / "logs" / f"finetune_seed{seed}_cfg{idx}.csv"
            bn_finetune(m, xtr, ytr, cfg.finetune_config(), test=(xte, yte), log_path=logp)
        acc = evaluate(m, xte, yte)
        row = {"seed": seed, "config_index": idx, "mode": mode, "device": device.name, "sigma": sigma,
               "T": noise.drift_t if noise.drift else "", "parasitics": int(noise.parasitics), "accuracy": acc}
        row.update({f"pc2_{n}": v for n, v in pcs.items()})
        row.update({f"pc2_proj_{n}": v for n, v in proj.items()})
        rows.append(row)
    return rows


def _dump(d: Path, layers: dict, device, noise):
    d.mkdir(parents=True, exist_ok=True)
    meta = {"device": device.to_dict(), "T": noise.drift_t if noise.drift else 1.0, "T0": noise.drift_t0,
            "nu": device.nu, "drift": noise.drift, "seed": noise.seed, "layers": list(layers)}
    for name, l in layers.items():
        io.save_tensor(d / f"{name}.ideal.tnsr", l.w_ideal.astype(np.float32))
        io.save_tensor(d / f"{name}.ni.tnsr", l.w_ni.astype(np.float32))
    (d / "dump.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def deploy_experiment(cfg: ExperimentConfig, base: Path, out: Optional[Path] = None) -> tuple[list[dict], list[str]]:
    model = io.load_checkpoint(_resolve(base, cfg.checkpoint))
    data = load_data(cfg, base)
    if tuple(data[0].shape[1:]) != model.spec.input_shape:
        raise ConfigError(f"dataset images {data[0].shape[1:]} do not match checkpoint input {model.spec.input_shape}")
    device = cfg.device_spec(base)
    jobs = [(s, p) for s in cfg.seeds for p in sweep_points(cfg, device)]
    threads = max(1, int(os.environ.get("IMCBN_THREADS", "1")))
    if out is not None:
        _prepare_out(out)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            chunks = list(ex.map(lambda j: run_deployment(cfg, model, data, j[0], j[1], out), jobs))
    else:
        chunks = [run_deployment(cfg, model, data, s, p, out) for s, p in jobs]
    rows = [r for c in chunks for r in c]
    rows.sort(key=lambda r: (r["seed"], r["config_index"], MODE_ORDER[r["mode"]]))
    return rows, model.conv_names


def cmd_deploy(args) -> int:
    cfg, base = load_config(args.config, require_checkpoint=True)
    out = Path(args.out)
    rows, conv = deploy_experiment(cfg, base, out)
    analysis.write_csv(out / "results.csv", rows, result_columns(conv))
    print(f"wrote {len(rows)} rows -> {out / 'results.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

class AnalyzeCfg(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    dump: str
    bins: int = Field(50, ge=1)


def _dump_dirs(root: Path) -> list[Path]:
    if (root / "dump.json").exists():
        return [root]
    dirs = sorted(p.parent for p in root.glob("*/dump.json"))
    if not dirs:
        raise ConfigError(f"no deployment dump found under {root}")
    return dirs


PCA_CSV = ["deployment"] + analysis.PCA_COLUMNS
HIST_CSV = ["deployment", "layer_id", "which", "bin_lo", "bin_hi", "count"]


def analyze_dump(root: Path, bins: int = 50):
    pca_rows, hist_rows = [], []
    for d in _dump_dirs(root):
        meta = json.loads((d / "dump.json").read_text())
        pairs = {n: (io.load_tensor(d / f"{n}.ideal.tnsr"), io.load_tensor(d / f"{n}.ni.tnsr")) for n in meta["layers"]}
        nu = meta["nu"] if meta.get("drift") else 0.0
        for r in analysis.pca_rows(pairs, meta["T"], meta["T0"], nu):
            pca_rows.append({"deployment": d.name, **r})
        for n, (wi, wn) in pairs.items():
            for which, w in (("ideal", wi), ("ni", wn)):
                st = analysis.dist_stats(w, bins)
                for lo, hi, c in zip(st.edges[:-1], st.edges[1:], st.counts):
                    hist_rows.append({"deployment": d.name, "layer_id": n, "which": which,
                                      "bin_lo": float(lo), "bin_hi": float(hi), "count": int(c)})
    return pca_rows, hist_rows


def cmd_analyze(args) -> int:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
            acfg = AnalyzeCfg.model_validate(raw)
        except (OSError, json.JSONDecodeError, ValidationError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        dump, bins = _resolve(Path(args.config).parent, acfg.dump), acfg.bins
    else:
        dump, bins = None, args.bins
    if args.dump:
        dump = Path(args.dump)
    if dump is None:
        raise ConfigError("analyze needs a dump directory (--dump or config 'dump')")
    if not dump.exists():
        raise ConfigError(f"dump directory {dump} does not exist")
    pca_rows, hist_rows = analyze_dump(dump, bins)
    out = _prepare_out(Path(args.out))
    analysis.write_csv(out / "pca.csv", pca_rows, PCA_CSV)
    analysis.write_csv(out / "hist.csv", hist_rows, HIST_CSV)
    print(f"wrote {len(pca_rows)} PCA rows -> {out / 'pca.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

class CostCfg(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    arch: list[str] = ["vgg16", "resnet18"]
    batch_size: int = Field(1, ge=1)
    epochs: int = Field(1, ge=1)
    dataset_size: int = Field(1, ge=1)
    params: dict = {}


COST_CSV = ["arch", "baseline_mem_bytes", "bnonly_mem_bytes", "mem_savings_pct",
            "baseline_energy_j", "bnonly_energy_j", "energy_savings_pct"]


def cost_table(ccfg: CostCfg) -> list[dict]:
    try:
        params = cost.CostModelParams(**ccfg.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params: {exc}") from None
    rows = []
    for name in ccfg.arch:
        try:
            arch = cost.arch_summary(name, ccfg.batch_size)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        rep = cost.cost_report(arch, params, ccfg.epochs, ccfg.dataset_size)
        rows.append({"arch": arch.name, "baseline_mem_bytes": rep.baseline_mem_bytes,
                     "bnonly_mem_bytes": rep.bnonly_mem_bytes, "mem_savings_pct": rep.mem_savings_pct,
                     "baseline_energy_j": rep.baseline_energy_j if rep.baseline_energy_j is not None else "",
                     "bnonly_energy_j": rep.bnonly_energy_j if rep.bnonly_energy_j is not None else "",
                     "energy_savings_pct": rep.energy_savings_pct if rep.energy_savings_pct is not None else ""})
    return rows


def cmd_cost(args) -> int:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    if args.arch:
        raw["arch"] = args.arch
    try:
        ccfg = CostCfg.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    rows = cost_table(ccfg)
    print(f"{'model':<24} {'mem base MB':>12} {'mem BN MB':>10} {'mem save %':>10} {'energy save %':>13}")
    for r in rows:
        es = r["energy_savings_pct"]
        print(f"{r['arch']:<24} {r['baseline_mem_bytes'] / 1e6:>12.3f} {r['bnonly_mem_bytes'] / 1e6:>10.3f} "
              f"{r['mem_savings_pct']:>10.2f} {es if es == '' else format(es, '.2f'):>13}")
    if args.out:
        out = _prepare_out(Path(args.out))
        analysis.write_csv(out / "cost.csv", rows, COST_CSV)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imcbn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train a full-precision baseline checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("deploy", help="deploy onto crossbars, optionally tune, evaluate")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deploy)

    s = sub.add_parser("analyze", help="PCA and histograms of a deployment dump")
    s.add_argument("--config")
    s.add_argument("--dump")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("cost", help="training memory/energy savings table")
    s.add_argument("--config")
    s.add_argument("--arch", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, io.CheckpointError, io.TensorFormatError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
