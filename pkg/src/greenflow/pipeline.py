"""Everything between the solvers and the network.

Seven-channel input encoding with location maps, per-sample normalization,
dataset generation from bias sweeps, the training driver, warm-started
simulation, the cold-vs-warm benchmark, and I-V figure-of-merit extraction.

Image layout: channels x height x width with height the confinement axis
(ny) and width the transport axis (nx); fields store (nx, ny) so images are
transposed field arrays.
"""

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import neuralnet as nn
from .device import DeviceSpec, Grid, build_device, format_device_config
from .poisson import DENSITY_FLOOR_CM3, Field, density_field, potential_field
from .scf import ScfConfig, ScfResult, first_iteration, record_snapshot, run_scf

log = logging.getLogger("greenflow.pipeline")

CHANNEL_ORDER = ("potential", "log_density", "vd", "vg", "map_x", "map_y", "map_z")
PAD_MULTIPLE = 8
STD_FLOOR = 1e-8

DEFAULT_VG_SWEEP = tuple(round(0.025 * k, 3) for k in range(33))   # 0.000 .. 0.800
DEFAULT_VD_SWEEP = (0.05, 0.18, 0.31, 0.44, 0.57, 0.70)

TRAIN_FRACTION = 0.70


def location_maps(height: int, width: int) -> np.ndarray:
    """Coordinate-gradient channels in [0, 1]; the out-of-plane map is 0.5."""
    if height < 2 or width < 2:
        raise ValueError("location maps need at least 2x2 pixels")
    j = np.linspace(0.0, 1.0, width)
    i = np.linspace(0.0, 1.0, height)
    map_x = np.broadcast_to(j[None, :], (height, width))
    map_y = np.broadcast_to(i[:, None], (height, width))
    map_z = np.full((height, width), 0.5)
    return np.stack([map_x, map_y, map_z])


def _pad_amounts(size: int, multiple: int = PAD_MULTIPLE):
    target = ((size + multiple - 1) // multiple) * multiple
    lead = (target - size) // 2
    return lead, target - size - lead


def pad_image(channels: np.ndarray) -> np.ndarray:
    """Reflect-pad (C, H, W) spatial dims up to multiples of eight."""
    top, bottom = _pad_amounts(channels.shape[1])
    left, right = _pad_amounts(channels.shape[2])
    return np.pad(channels, ((0, 0), (top, bottom), (left, right)), mode="reflect")


def crop_image(channels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of pad_image for the original (height, width)."""
    top, _ = _pad_amounts(height)
    left, _ = _pad_amounts(width)
    return channels[..., top:top + height, left:left + width]


@dataclass(frozen=True)
class NormStats:
    """Standardization constants of the two field channels of one sample."""

    potential_mean: float
    potential_std: float
    log_density_mean: float
    log_density_std: float

    def as_tuple(self):
        return (self.potential_mean, self.potential_std,
                self.log_density_mean, self.log_density_std)


def _standardize(image: np.ndarray):
    mean = float(image.mean())
    std = max(float(image.std()), STD_FLOOR)
    return (image - mean) / std, mean, std


def build_input(potential: Field, density: Field, vg: float, vd: float):
    """Assemble the 7-channel image from first-iteration fields.

    Channels: standardized potential, standardized log10 density, constant
    drain voltage, constant gate voltage, and the three location maps; the
    stack is then reflect-padded to multiples of eight.
    """
    if potential.shape != density.shape:
        raise ValueError("potential and density shapes differ")
    v_img = potential.values.T                       # (ny, nx)
    n_img = np.log10(np.maximum(density.values.T, DENSITY_FLOOR_CM3))
    h, w = v_img.shape

    v_norm, v_mean, v_std = _standardize(v_img)
    n_norm, n_mean, n_std = _standardize(n_img)
    maps = location_maps(h, w)
    channels = np.stack([
        v_norm, n_norm,
        np.full((h, w), vd), np.full((h, w), vg),
        maps[0], maps[1], maps[2]])
    stats = NormStats(v_mean, v_std, n_mean, n_std)
    return pad_image(channels), stats


@dataclass
class Sample:
    """One bias point: padded input image, normalized padded targets."""

    x: np.ndarray                 # (7, Hp, Wp)
    target_potential: np.ndarray  # (1, Hp, Wp), input-stats normalized
    target_log_density: np.ndarray
    stats: NormStats
    vg: float
    vd: float
    config_hash: str
    snapshot_first: int = 1
    snapshot_final: int = 0


@dataclass
class Dataset:
    samples: list
    split: list                   # "train" | "test" per sample
    seed: int
    grid_shape: tuple             # (nx, ny)
    config_hash: str
    config_text: str

    def indices(self, part: str):
        return [i for i, s in enumerate(self.split) if s == part]


def _normalized_target(image: np.ndarray, mean: float, std: float) -> np.ndarray:
    return pad_image(((image - mean) / std)[None])


def sample_from_result(result: ScfResult, config_hash: str) -> Sample:
    """Input from the first snapshot, targets from the converged fields."""
    v1, n1 = record_snapshot(result, 1)
    vf, nf = record_snapshot(result, "final")
    x, stats = build_input(v1, n1, result.vg, result.vd)
    tv = _normalized_target(vf.values.T, stats.potential_mean, stats.potential_std)
    logn_f = np.log10(np.maximum(nf.values.T, DENSITY_FLOOR_CM3))
    tn = _normalized_target(logn_f, stats.log_density_mean, stats.log_density_std)
    return Sample(x=x, target_potential=tv, target_log_density=tn, stats=stats,
                  vg=result.vg, vd=result.vd, config_hash=config_hash,
                  snapshot_first=1, snapshot_final=result.iterations)


def config_hash_of(spec: DeviceSpec) -> str:
    return hashlib.sha256(format_device_config(spec).encode()).hexdigest()[:16]


def _worker_count(requested=None) -> int:
    env = os.environ.get("GREENFLOW_THREADS")
    cap = int(env) if env else None
    if requested is None:
        requested = cap or 1
    if cap is not None:
        requested = min(requested, cap)
    return max(1, requested)


def _scf_cold_job(args):
    spec, vg, vd, cfg = args
    grid = build_device(spec)
    return run_scf(grid, vg, vd, cfg=cfg)


def _run_bias_sweep(spec: DeviceSpec, biases, cfg: ScfConfig, workers=None):
    """Cold SCF at every bias, in deterministic bias order."""
    jobs = [(spec, vg, vd, cfg) for vg, vd in biases]
    n_workers = _worker_count(workers)
    if n_workers == 1 or len(jobs) <= 1:
        return [_scf_cold_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_scf_cold_job, jobs))


def build_dataset(spec: DeviceSpec, vg_values=DEFAULT_VG_SWEEP,
                  vd_values=DEFAULT_VD_SWEEP, seed: int = 0,
                  cfg: ScfConfig | None = None, workers=None) -> Dataset:
    """Cold-start SCF over the bias grid; one sample per converged point."""
    biases = [(float(vg), float(vd)) for vd in vd_values for vg in vg_values]
    if not biases:
        raise ValueError("empty bias sweep")
    if cfg is None:
        cfg = ScfConfig(record_snapshots=True)
    elif not cfg.record_snapshots:
        raise ValueError("dataset generation needs snapshot recording enabled")

    chash = config_hash_of(spec)
    results = _run_bias_sweep(spec, biases, cfg, workers)
    samples = []
    for (vg, vd), res in zip(biases, results):
        if not res.converged:
            log.warning("excluding non-converged bias vg=%.3f vd=%.3f "
                        "(%d iterations)", vg, vd, res.iterations)
            continue
        samples.append(sample_from_result(res, chash))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_train = round(TRAIN_FRACTION * len(samples))
    split = ["test"] * len(samples)
    for i in order[:n_train]:
        split[i] = "train"
    grid = build_device(spec)
    return Dataset(samples=samples, split=split, seed=seed,
                   grid_shape=(grid.nx, grid.ny), config_hash=chash,
                   config_text=format_device_config(spec))


# ---------------------------------------------------------------------------
# dataset container: text manifest + per-sample little-endian float64 blobs


def save_dataset(ds: Dataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = [
        f"seed = {ds.seed}",
        f"grid_shape = {ds.grid_shape[0]},{ds.grid_shape[1]}",
        f"config_hash = {ds.config_hash}",
        f"channel_order = {','.join(CHANNEL_ORDER)}",
        f"n_samples = {len(ds.samples)}",
    ]
    for i, (s, part) in enumerate(zip(ds.samples, ds.split)):
        fname = f"sample_{i:04d}.bin"
        blob = np.concatenate([
            s.x.ravel(), s.target_potential.ravel(),
            s.target_log_density.ravel()]).astype("<f8")
        with open(os.path.join(directory, fname), "wb") as fh:
            fh.write(blob.tobytes())
        stats = ",".join(repr(v) for v in s.stats.as_tuple())
        lines.append(
            f"sample {i} file={fname} vg={s.vg!r} vd={s.vd!r} split={part} "
            f"shape={s.x.shape[1]},{s.x.shape[2]} stats={stats} "
            f"snapshots={s.snapshot_first},{s.snapshot_final} "
            f"config={s.config_hash}")
    with open(os.path.join(directory, "dataset.manifest"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(directory, "device.cfg"), "w", encoding="utf-8") as fh:
        fh.write(ds.config_text)


def load_dataset(directory) -> Dataset:
    with open(os.path.join(directory, "dataset.manifest"), "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    with open(os.path.join(directory, "device.cfg"), "r", encoding="utf-8") as fh:
        config_text = fh.read()
    meta = {}
    samples, split = [], []
    for ln in lines:
        if not ln.startswith("sample "):
            key, _, val = ln.partition(" = ")
            meta[key] = val
            continue
        kv = dict(item.split("=", 1) for item in ln.split()[2:])
        hp, wp = (int(d) for d in kv["shape"].split(","))
        raw = np.fromfile(os.path.join(directory, kv["file"]), dtype="<f8")
        x = raw[:7 * hp * wp].reshape(7, hp, wp)
        tv = raw[7 * hp * wp:8 * hp * wp].reshape(1, hp, wp)
        tn = raw[8 * hp * wp:].reshape(1, hp, wp)
        stats = NormStats(*(float(v) for v in kv["stats"].split(",")))
        snap_first, snap_final = (int(v) for v in kv["snapshots"].split(","))
        samples.append(Sample(
            x=x, target_potential=tv, target_log_density=tn, stats=stats,
            vg=float(kv["vg"]), vd=float(kv["vd"]), config_hash=kv["config"],
            snapshot_first=snap_first, snapshot_final=snap_final))
        split.append(kv["split"])
    nx, ny = (int(d) for d in meta["grid_shape"].split(","))
    return Dataset(samples=samples, split=split, seed=int(meta["seed"]),
                   grid_shape=(nx, ny), config_hash=meta["config_hash"],
                   config_text=config_text)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 2e-3               # peak; decays on a cosine to lr/100
    batch_size: int = 16
    seed: int = 0
    dropout_rate: float = nn.DEFAULT_DROPOUT
    divergence_loss: float = 1e3

    def lr_at(self, epoch: int) -> float:
        # cosine decay polishes the late epochs so the predictor is accurate
        # enough to pay off as warm-start iterations
        floor = self.lr / 100.0
        phase = (epoch - 1) / max(self.epochs - 1, 1)
        return floor + 0.5 * (self.lr - floor) * (1.0 + np.cos(np.pi * phase))


def _stack(ds: Dataset, idx, target: str):
    x = np.stack([ds.samples[i].x for i in idx])
    key = "target_potential" if target == "potential" else "target_log_density"
    t = np.stack([getattr(ds.samples[i], key) for i in idx])
    return x, t


def _heldout_loss(model, x, t):
    if len(x) == 0:
        return float("nan")
    # batched internal path: loss monitoring does not need the per-sample
    # bitwise guarantee of model_forward's infer mode
    y, _ = nn._forward_with_cache(model, x, "infer", 0, update_stats=False)
    return nn.mse_loss(y, t)[0]


def train_model(ds: Dataset, target: str, cfg: TrainConfig):
    """Train one field predictor; returns (model, history rows)."""
    train_idx = ds.indices("train")
    test_idx = ds.indices("test")
    if not train_idx:
        raise ValueError("train split is empty")
    x_train, t_train = _stack(ds, train_idx, target)
    x_test, t_test = _stack(ds, test_idx, target)

    residual = 0 if target == "potential" else 1
    model = nn.init_model(np.random.default_rng(cfg.seed),
                          residual_channel=residual,
                          dropout_rate=cfg.dropout_rate)
    state = nn.AdamState.for_model(model)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    dropout_rng = np.random.default_rng(cfg.seed + 2)

    n = len(train_idx)
    batch = min(max(2, cfg.batch_size), n) if n >= 2 else 1
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            sel = order[start:start + batch]
            if len(sel) < 2 and n >= 2:
                continue    # batch normalization needs at least two samples
            xb, tb = x_train[sel], t_train[sel]
            y, caches = nn.model_train_step(model, xb, "train", dropout_rng)
            loss, gy = nn.mse_loss(y, tb)
            _, grads = nn.model_backward(model, xb, caches, gy)
            nn.adam_step(model, grads, state, lr=lr)
            losses.append(loss)
            if loss > cfg.divergence_loss:
                raise RuntimeError(
                    f"training diverged: {target} model, epoch {epoch}, "
                    f"batch loss {loss:.3e} > {cfg.divergence_loss:.0e}")
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.append((target, epoch, train_loss, _heldout_loss(model, x_test, t_test)))
    return model, history


def train(ds: Dataset, cfg: TrainConfig = TrainConfig()):
    """Train the potential and charge models; returns both plus loss history."""
    model_v, hist_v = train_model(ds, "potential", cfg)
    model_n, hist_n = train_model(ds, "charge", cfg)
    return model_v, model_n, hist_v + hist_n


# ---------------------------------------------------------------------------
# inference and warm-started simulation


def predict_fields(model_v, model_n, potential: Field, density: Field,
                   vg: float, vd: float, grid_shape):
    """Predicted converged fields from first-iteration fields."""
    nx, ny = grid_shape
    x, stats = build_input(potential, density, vg, vd)
    xb = x[None]
    pv = nn.model_forward(model_v, xb, mode="infer")[0]
    pn = nn.model_forward(model_n, xb, mode="infer")[0]
    v_img = crop_image(pv, ny, nx)[0] * stats.potential_std + stats.potential_mean
    logn_img = crop_image(pn, ny, nx)[0] * stats.log_density_std + stats.log_density_mean
    n_img = np.maximum(np.power(10.0, logn_img), DENSITY_FLOOR_CM3)
    return potential_field(v_img.T), density_field(n_img.T)


def warm_start_run(grid: Grid, model_v, model_n, vg: float, vd: float,
                   cfg: ScfConfig, bootstrap: ScfResult | None = None):
    """Bootstrap one NEGF iteration, predict, re-run the loop warm.

    Returns (warm result, total NEGF evaluations including the bootstrap).
    A converged cold run may stand in for the bootstrap: its first snapshot
    is identical to a dedicated single-iteration run.
    """
    if bootstrap is None:
        bootstrap = first_iteration(grid, vg, vd, cfg)
    v1, n1 = record_snapshot(bootstrap, 1)
    pred_v, pred_n = predict_fields(model_v, model_n, v1, n1, vg, vd,
                                    (grid.nx, grid.ny))
    warm = run_scf(grid, vg, vd, init=(pred_v, pred_n), cfg=cfg)
    return warm, warm.iterations + 1


# ---------------------------------------------------------------------------
# benchmark


BENCHMARK_COLUMNS = ("vg", "vd", "iters_cold", "iters_warm",
                     "I_cold", "I_warm", "reduction_pct")


def _benchmark_job(args):
    spec, model_v, model_n, vg, vd, cfg = args
    grid = build_device(spec)
    cold_cfg = replace(cfg, record_snapshots=True)
    cold = run_scf(grid, vg, vd, cfg=cold_cfg)
    warm, iters_warm = warm_start_run(grid, model_v, model_n, vg, vd, cfg,
                                      bootstrap=cold)
    return {
        "vg": vg, "vd": vd,
        "iters_cold": cold.iterations, "iters_warm": iters_warm,
        "I_cold": cold.current, "I_warm": warm.current,
        "reduction_pct": 100.0 * (1.0 - iters_warm / cold.iterations),
        "converged_cold": cold.converged, "converged_warm": warm.converged,
    }


def benchmark(spec: DeviceSpec, models, vg_values, vd_values=(0.05, 0.7),
              cfg: ScfConfig = ScfConfig(), workers=None):
    """Cold vs warm iteration counts and currents over the bias grid."""
    model_v, model_n = models
    jobs = [(spec, model_v, model_n, float(vg), float(vd), cfg)
            for vd in vd_values for vg in vg_values]
    n_workers = _worker_count(workers)
    if n_workers == 1 or len(jobs) <= 1:
        rows = [_benchmark_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(_benchmark_job, jobs))
    for row in rows:
        if not (row["converged_cold"] and row["converged_warm"]):
            log.warning("benchmark row vg=%.3f vd=%.3f did not converge "
                        "(cold=%s warm=%s)", row["vg"], row["vd"],
                        row["converged_cold"], row["converged_warm"])
    return rows


def mean_reduction(rows, vg_min: float = None, vg_max: float = None) -> float:
    sel = [r for r in rows
           if (vg_min is None or r["vg"] >= vg_min - 1e-12)
           and (vg_max is None or r["vg"] <= vg_max + 1e-12)]
    return float(np.mean([r["reduction_pct"] for r in sel]))


# ---------------------------------------------------------------------------
# figures of merit


VTH_CRITERION_A = 1e-7     # constant-current threshold: 1e-7 A * W / L


def extract_fom(vg: np.ndarray, current: np.ndarray, w_over_l: float):
    """I_ON, I_OFF, min subthreshold swing, and constant-current V_TH."""
    vg = np.asarray(vg, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    if (current <= 0).any():
        raise ValueError("figure-of-merit extraction needs positive currents")
    order = np.argsort(vg)
    vg, current = vg[order], current[order]
    i_crit = VTH_CRITERION_A * w_over_l
    log_i = np.log10(current)

    v_th = None
    for i in range(len(vg) - 1):
        if current[i] < i_crit <= current[i + 1]:
            f = (np.log10(i_crit) - log_i[i]) / (log_i[i + 1] - log_i[i])
            v_th = float(vg[i] + f * (vg[i + 1] - vg[i]))
            break
    if v_th is None:
        raise ValueError("I-V curve never crosses the threshold criterion")

    ss_candidates = []
    for i in range(len(vg) - 1):
        below = current[i] < i_crit and current[i + 1] <= i_crit
        if below and current[i + 1] > current[i]:
            ss_candidates.append(
                (vg[i + 1] - vg[i]) / (log_i[i + 1] - log_i[i]) * 1e3)
    if not ss_candidates:
        raise ValueError("no increasing subthreshold segment below threshold")

    return {
        "I_ON": float(current[-1]),
        "I_OFF": float(current[0]),
        "SS_mV_dec": float(min(ss_candidates)),
        "V_TH": v_th,
    }
