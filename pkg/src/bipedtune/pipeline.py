"""File-producing experiment steps behind the command-line interface.

Output layout under ``cfg.output_dir``::

    config.yaml
    data/grfm_dataset.csv, data/grfm_dataset.meta.json
    models/grfm_force.npz, models/grfm_moment.npz, models/loss_curve.csv,
    models/training_meta.json
    tune/<trajectory>_<with_net|without_net>/theta.json, history.csv
    compare/report.csv, compare/report.txt
    simulate/<trajectory>_<mode>.csv, simulate/plot_<trajectory>_<mode>.py
    manifests/<command>.json

Floats are written with ``repr`` so that files round-trip exactly and re-runs
with the same config are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import difftune, grfm_net, plant
from .closed_loop import LearnedActuation, RolloutLog, run_closed_loop
from .config import ConfigError, ExperimentConfig
from .mpc import N_Q, N_R, MpcTheta
from .plant import CHANNELS, file_sha256

THETA_FORMAT = "bipedtune-theta"
THETA_VERSION = 1
STATE_NAMES = ("roll_rad", "pitch_rad", "yaw_rad", "px_m", "py_m", "pz_m",
               "wx_radps", "wy_radps", "wz_radps", "vx_mps", "vy_mps", "vz_mps")
UNIT = {"F": "n", "M": "nm"}


class VerifyError(RuntimeError):
    pass


class FallError(RuntimeError):
    """A rollout that must not fall did."""


# ---- small I/O helpers -------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, list(r)


def write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _rel(cfg, path):
    return os.path.relpath(path, cfg.output_dir)


def paths(cfg: ExperimentConfig) -> dict:
    o = cfg.output_dir
    return {"config": os.path.join(o, "config.yaml"),
            "dataset": os.path.join(o, "data", "grfm_dataset.csv"),
            "dataset_meta": os.path.join(o, "data", "grfm_dataset.meta.json"),
            "force": os.path.join(o, "models", "grfm_force.npz"),
            "moment": os.path.join(o, "models", "grfm_moment.npz"),
            "loss_curve": os.path.join(o, "models", "loss_curve.csv"),
            "train_meta": os.path.join(o, "models", "training_meta.json"),
            "report_csv": os.path.join(o, "compare", "report.csv"),
            "report_txt": os.path.join(o, "compare", "report.txt")}


def tune_dir(cfg, trajectory, with_net):
    return os.path.join(cfg.output_dir, "tune",
                        f"{trajectory}_{'with_net' if with_net else 'without_net'}")


def write_manifest(cfg: ExperimentConfig, command: str, outputs, extra=None):
    """Record the config hash and the sha256 of every output file."""
    man = {"command": command, "config_hash": cfg.config_hash(),
           "outputs": {_rel(cfg, p): file_sha256(p) for p in sorted(outputs)}}
    if extra:
        man.update(extra)
    path = os.path.join(cfg.output_dir, "manifests", f"{command}.json")
    write_json(path, man)
    return path


def verify_manifest(cfg: ExperimentConfig, command: str) -> dict:
    path = os.path.join(cfg.output_dir, "manifests", f"{command}.json")
    try:
        with open(path) as fh:
            man = json.load(fh)
    except FileNotFoundError as exc:
        raise VerifyError(f"no manifest for {command!r} at {path}") from exc
    if man.get("config_hash") != cfg.config_hash():
        raise VerifyError(f"{command}: outputs were produced by a different config")
    bad = []
    for rel, digest in man["outputs"].items():
        p = os.path.join(cfg.output_dir, rel)
        if not os.path.exists(p):
            bad.append(f"{rel} (missing)")
        elif file_sha256(p) != digest:
            bad.append(f"{rel} (hash mismatch)")
    if bad:
        raise VerifyError(f"{command}: " + ", ".join(bad))
    return man


def _store_config(cfg):
    p = paths(cfg)["config"]
    os.makedirs(cfg.output_dir, exist_ok=True)
    cfg.save(p)
    return p


# ---- theta checkpoints -------------------------------------------------------

def save_theta(path, theta: MpcTheta, cfg: ExperimentConfig, **meta):
    d = {"format": THETA_FORMAT, "version": THETA_VERSION, "config_hash": cfg.config_hash(),
         "q_diag": [float(v) for v in theta.q_diag], "r_diag": [float(v) for v in theta.r_diag]}
    d.update(meta)
    write_json(path, d)


def load_theta(path):
    """``(theta, metadata)`` from a checkpoint written by :func:`save_theta`."""
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a theta checkpoint ({exc})") from exc
    if d.get("format") != THETA_FORMAT or d.get("version") != THETA_VERSION:
        raise ValueError(f"{path}: not a {THETA_FORMAT} v{THETA_VERSION} checkpoint")
    if len(d["q_diag"]) != N_Q or len(d["r_diag"]) != N_R:
        raise ValueError(f"{path}: wrong number of weights")
    return MpcTheta(d["q_diag"], d["r_diag"]), d


def load_nets(cfg):
    p = paths(cfg)
    return (grfm_net.load(p["force"], expected_group="force"),
            grfm_net.load(p["moment"], expected_group="moment"))


# ---- simulate ---------------------------------------------------------------

def rollout_header():
    cols = ["step", "t_s"] + list(STATE_NAMES) + [f"ref_{n}" for n in STATE_NAMES]
    cols += [f"cmd_{c}_{UNIT[c[0]]}" for c in CHANNELS]
    cols += [f"eff_{c}_{UNIT[c[0]]}" for c in CHANNELS]
    return cols + ["contact0", "contact1", "kkt_residual"]


def rollout_rows(log: RolloutLog):
    for j in range(log.n_steps):
        yield ([j, float(log.t[j])] + list(log.x[j, :12]) + list(log.x_ref[j, :12])
               + list(log.u[j]) + list(log.ubar[j])
               + [bool(log.contacts[j, 0]), bool(log.contacts[j, 1]), float(log.kkt_residual[j])])


PLOT_TEMPLATE = '''"""Tracking plots for {csv}; run with python, needs matplotlib."""
import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(HERE, "{csv}"), newline="") as fh:
    rows = list(csv.DictReader(fh))
t = [float(r["t_s"]) for r in rows]
fig, axes = plt.subplots(2, 3, figsize=(12, 6), sharex=True)
for ax, name in zip(axes.ravel(), ["px_m", "py_m", "pz_m", "roll_rad", "pitch_rad", "yaw_rad"]):
    ax.plot(t, [float(r[name]) for r in rows], label="actual")
    ax.plot(t, [float(r["ref_" + name]) for r in rows], "--", label="reference")
    ax.set_title(name)
    ax.set_xlabel("t [s]")
axes[0, 0].legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "{png}"), dpi=120)
print("wrote", os.path.join(HERE, "{png}"))
'''


def simulate(cfg: ExperimentConfig, trajectory: str, theta_path=None, mode="plant",
             nets="none"):
    """Write one rollout CSV plus its plot script; returns ``(csv_path, log)``.

    ``mode`` is ``plant`` (hidden distortion) or ``nominal``; in nominal mode
    ``nets`` may be ``none``, ``learned`` (trained models) or ``identity``.
    """
    if mode not in ("plant", "nominal"):
        raise ConfigError("mode must be 'plant' or 'nominal'")
    spec = cfg.trajectory_spec(trajectory)
    setup = cfg.sim_setup()
    theta = cfg.theta_nominal() if theta_path is None else load_theta(theta_path)[0]
    if mode == "plant":
        log = plant.simulate_plant(theta, spec, setup, cfg.distortion(),
                                   seed=cfg.substream_seed(f"plant.eval.{trajectory}"))
        tag = "plant"
    else:
        act = None
        if nets == "learned":
            act = LearnedActuation(*load_nets(cfg))
        elif nets == "identity":
            act = LearnedActuation(grfm_net.identity_params("force"),
                                   grfm_net.identity_params("moment"))
        elif nets != "none":
            raise ConfigError("nets must be 'none', 'learned' or 'identity'")
        log = run_closed_loop(theta, spec, setup, act)
        tag = "nominal" if nets == "none" else f"nominal_{nets}_net"
    out_dir = os.path.join(cfg.output_dir, "simulate")
    csv_path = os.path.join(out_dir, f"{trajectory}_{tag}.csv")
    write_csv(csv_path, rollout_header(), rollout_rows(log))
    script = os.path.join(out_dir, f"plot_{trajectory}_{tag}.py")
    with open(script, "w") as fh:
        fh.write(PLOT_TEMPLATE.format(csv=os.path.basename(csv_path),
                                      png=f"{trajectory}_{tag}.png"))
    cfg_path = _store_config(cfg)
    write_manifest(cfg, f"simulate_{trajectory}_{tag}", [csv_path, script, cfg_path],
                   {"fell": bool(log.fell), "steps": log.n_steps,
                    "theta": theta_path and os.path.abspath(theta_path)})
    return csv_path, log


# ---- collect-data ------------------------------------------------------------

def collect(cfg: ExperimentConfig):
    if cfg.data.n_rollouts < 1:
        raise ConfigError("data.n_rollouts must be at least 1")
    specs = [cfg.trajectory_spec(n) for n in cfg.trajectory.presets]
    model = cfg.distortion()
    ds, n_fallen = plant.collect_dataset(
        specs, cfg.theta_nominal(), model, cfg.data.n_rollouts,
        seed=cfg.substream_seed("data.collect"), setup=cfg.sim_setup(),
        speed_range=tuple(cfg.data.speed_scale_range), yaw_range=tuple(cfg.data.yaw_scale_range),
        skip_settle=cfg.data.skip_settle)
    ds.meta["config_hash"] = cfg.config_hash()
    ds.meta["trajectories"] = list(cfg.trajectory.presets)
    p = paths(cfg)
    os.makedirs(os.path.dirname(p["dataset"]), exist_ok=True)
    plant.write_dataset(ds, p["dataset"], p["dataset_meta"])
    cfg_path = _store_config(cfg)
    write_manifest(cfg, "collect-data", [p["dataset"], p["dataset_meta"], cfg_path],
                   {"records": len(ds), "fallen_rollouts": n_fallen})
    return ds, n_fallen


# ---- train-grfm ---------------------------------------------------------------

def train(cfg: ExperimentConfig, dataset_path=None):
    p = paths(cfg)
    dataset_path = dataset_path or p["dataset"]
    meta_path = os.path.splitext(dataset_path)[0] + ".meta.json"
    ds = plant.read_dataset(dataset_path, meta_path if os.path.exists(meta_path) else None)
    curve, meta = [], {"config_hash": cfg.config_hash(), "dataset_sha256": file_sha256(dataset_path),
                       "records": len(ds)}
    outputs = []
    os.makedirs(os.path.dirname(p["force"]), exist_ok=True)
    for group in ("force", "moment"):
        X, Y = ds.group_arrays(group)
        params, hist = grfm_net.train(X, Y, cfg.layer_sizes(), cfg.train_config(group),
                                      group=group, layer_norm=cfg.train.layer_norm)
        grfm_net.save(params, p[group])
        outputs.append(p[group])
        for e, (tr, va) in enumerate(zip(hist["train_mse"], hist["val_mse"])):
            curve.append([group, e, tr, va])
        va = np.asarray(hist["val_mse"])
        meta[group] = {"final_val_mse": float(va[-1]), "best_val_mse": float(va.min()),
                       "best_epoch": int(va.argmin()), "final_train_mse": float(hist["train_mse"][-1]),
                       "val_indices": [int(i) for i in hist["val_indices"]]}
    write_csv(p["loss_curve"], ["network", "epoch", "train_mse", "val_mse"], curve)
    write_json(p["train_meta"], meta)
    cfg_path = _store_config(cfg)
    write_manifest(cfg, "train-grfm", outputs + [p["loss_curve"], p["train_meta"], cfg_path])
    return meta


# ---- tune --------------------------------------------------------------------

def history_header():
    return (["iteration", "L", "L_Eul", "L_pos", "L_ctrl", "best"]
            + [f"q{i}" for i in range(N_Q)] + [f"r{i}" for i in range(N_R)]
            + [f"grad_q{i}" for i in range(N_Q)] + [f"grad_r{i}" for i in range(N_R)])


def tune(cfg: ExperimentConfig, with_net: bool, trajectories=None):
    """Tune on each trajectory; returns ``{trajectory: TuneResult}``."""
    trajectories = list(trajectories or cfg.trajectory.presets)
    p = paths(cfg)
    model_files = [p["force"], p["moment"]]
    nets = load_nets(cfg) if with_net else None
    setup = cfg.sim_setup()
    results, outputs = {}, []
    for name in trajectories:
        tcfg = cfg.tune_config(name, with_net)
        res = difftune.tune(tcfg, setup, nets)
        d = tune_dir(cfg, name, with_net)
        rows = []
        for k, (th, L, g, terms) in enumerate(zip(res.theta_history, res.loss_history,
                                                   res.grad_history, res.term_history)):
            rows.append([k, L, terms["L_Eul"], terms["L_pos"], terms["L_ctrl"],
                         k == res.best_iteration] + list(th) + list(g))
        hist_path = os.path.join(d, "history.csv")
        write_csv(hist_path, history_header(), rows)
        meta = {"trajectory": name, "use_grfm_net": with_net,
                "best_iteration": res.best_iteration, "iterations": tcfg.iterations,
                "loss_best": float(res.loss_history[res.best_iteration]),
                "loss_initial": float(res.loss_history[0]), "aborted": res.aborted,
                "step_mode": tcfg.step_mode}
        if with_net:
            meta["model_sha256"] = {os.path.basename(f): file_sha256(f) for f in model_files}
        else:
            present = [os.path.basename(f) for f in model_files if os.path.exists(f)]
            meta["ignored_model_files"] = present
        theta_path = os.path.join(d, "theta.json")
        save_theta(theta_path, res.theta_best, cfg, **meta)
        outputs += [hist_path, theta_path]
        results[name] = res
    cfg_path = _store_config(cfg)
    write_manifest(cfg, f"tune_{'with_net' if with_net else 'without_net'}",
                   outputs + [cfg_path], {"trajectories": trajectories})
    return results


# ---- compare -------------------------------------------------------------------

@dataclass
class ReportRow:
    trajectory: str
    parameter_set: str
    L_Eul: float
    L_pos: float
    L_ctrl: float
    L: float
    fell: bool
    reduction: dict


REPORT_COLUMNS = ("L_Eul", "L_pos", "L_ctrl", "L")


def evaluate_on_plant(cfg: ExperimentConfig, theta: MpcTheta, trajectory: str):
    """Plant rollout with the trajectory's fixed noise stream; returns ``(terms, log)``."""
    log = plant.simulate_plant(theta, cfg.trajectory_spec(trajectory), cfg.sim_setup(),
                               cfg.distortion(), seed=cfg.substream_seed(f"plant.eval.{trajectory}"))
    t = difftune.loss_terms(log)
    terms = {"L_Eul": t[0], "L_pos": t[1], "L_ctrl": t[2],
             "L": difftune.total_loss(t, cfg.tune.alpha1, cfg.tune.alpha2)}
    return terms, log


def default_theta_sets(cfg):
    """Nominal plus the tuned checkpoints found under the output directory."""
    sets = {"nominal": {n: None for n in cfg.trajectory.presets}}
    for label, with_net in (("tuned-without-net", False), ("tuned-with-net", True)):
        found = {n: os.path.join(tune_dir(cfg, n, with_net), "theta.json")
                 for n in cfg.trajectory.presets}
        missing = [f for f in found.values() if not os.path.exists(f)]
        if missing:
            raise FileNotFoundError(f"missing tuned checkpoint(s): {', '.join(missing)}")
        sets[label] = found
    return sets


def compare(cfg: ExperimentConfig, theta_sets=None):
    """Evaluate every parameter set on the plant for every trajectory.

    ``theta_sets`` maps a label to ``{trajectory: checkpoint path or None}``
    (``None`` is the nominal weights).  All labels must cover the same
    trajectories.  The first label is the reference for the reduction columns.
    """
    theta_sets = theta_sets or default_theta_sets(cfg)
    labels = list(theta_sets)
    trajs = [set(v) for v in theta_sets.values()]
    if any(t != trajs[0] for t in trajs):
        raise ConfigError("parameter sets cover different trajectories")
    order = [n for n in cfg.trajectory.presets if n in trajs[0]]
    order += sorted(trajs[0] - set(order))
    rows = []
    for name in order:
        ref = None
        for label in labels:
            src = theta_sets[label][name]
            theta = cfg.theta_nominal() if src is None else load_theta(src)[0]
            terms, log = evaluate_on_plant(cfg, theta, name)
            if ref is None:
                ref = terms
            red = {k: (100.0 * (1.0 - terms[k] / ref[k]) if ref[k] != 0 else 0.0)
                   for k in REPORT_COLUMNS}
            rows.append(ReportRow(name, label, terms["L_Eul"], terms["L_pos"], terms["L_ctrl"],
                                  terms["L"], bool(log.fell), red))
    p = paths(cfg)
    header = (["trajectory", "parameter_set"] + list(REPORT_COLUMNS)
              + [f"reduction_{k}_pct" for k in REPORT_COLUMNS] + ["fell"])
    write_csv(p["report_csv"], header,
              ([r.trajectory, r.parameter_set, r.L_Eul, r.L_pos, r.L_ctrl, r.L]
               + [r.reduction[k] for k in REPORT_COLUMNS] + [r.fell] for r in rows))
    with open(p["report_txt"], "w") as fh:
        fh.write(format_report(rows))
    cfg_path = _store_config(cfg)
    write_manifest(cfg, "compare", [p["report_csv"], p["report_txt"], cfg_path],
                   {"parameter_sets": {k: {t: (v and os.path.abspath(v)) for t, v in d.items()}
                                       for k, d in theta_sets.items()}})
    return rows


def format_report(rows) -> str:
    head = ["trajectory", "parameters", "L_Eul", "L_pos", "L_ctrl", "L", "dL [%]"]
    body = [[r.trajectory, r.parameter_set + (" (fell)" if r.fell else ""),
             f"{r.L_Eul:.4g}", f"{r.L_pos:.4g}", f"{r.L_ctrl:.4g}", f"{r.L:.4g}",
             f"{0.0 - r.reduction['L']:+.1f}"] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(head), "  ".join("-" * w for w in widths)] + [line(b) for b in body]
    return "\n".join(out) + "\n"
