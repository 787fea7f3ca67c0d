"""Diffusion tensor estimation from DWI.

Pipeline: log-linear least squares per voxel for the initial tensor,
optional damped nonlinear refinement of the signal model
``S_i = S0 * exp(-b_i * g_i^T D g_i)``, Frobenius-norm outlier zeroing,
and scan-wise intensity normalization of the tensor volume.

Tensor channel order is (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) in mm^2/s.
Voxels whose fit failed (all-zero or non-finite signal) and voxels zeroed
by the outlier rule carry a nonzero flag and are exactly zero in all six
tensor channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import Mask, Volume

#: Frobenius-norm threshold above which a fitted tensor counts as an
#: estimation failure and is zeroed (full 3x3 matrix norm, mm^2/s).
OUTLIER_NORM_THRESHOLD = 0.1

#: Signals are clamped to this fraction of the voxel's S0 estimate
#: before taking logs, so noisy voxels cannot produce -inf.
LOG_FLOOR_FRACTION = 1e-6


class SchemeError(Exception):
    """Acquisition scheme violates the data contract."""


class DegenerateScheme(SchemeError):
    """Directions do not span the 7-parameter tensor model."""


class ConstantField(Exception):
    """Normalization impossible: zero variance inside the mask."""


@dataclass(frozen=True)
class DiffusionScheme:
    """b-values and unit gradient directions, one entry per DWI volume.

    ``bvals`` in s/mm^2; ``bvecs`` rows are unit vectors for b > 0
    (direction is irrelevant for b = 0 rows).  At least one b = 0 volume
    is required; the rank of the tensor model is checked when the design
    matrix is built.
    """

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvals.ndim != 1 or bvecs.shape != (bvals.size, 3):
            raise SchemeError(
                f"need bvals (N,) and bvecs (N,3); got {bvals.shape}, {bvecs.shape}")
        if not (bvals >= 0).all():
            raise SchemeError("b-values must be non-negative")
        if self.n_b0 < 1:
            raise SchemeError("at least one b=0 volume required")
        norms = np.linalg.norm(bvecs[bvals > 0], axis=1)
        if norms.size and not np.allclose(norms, 1.0, atol=1e-6):
            raise SchemeError("gradient directions must be unit length for b>0")
        bvals.setflags(write=False)
        bvecs.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    @property
    def n_volumes(self) -> int:
        return self.bvals.size

    @property
    def n_b0(self) -> int:
        return int(np.count_nonzero(self.bvals == 0))


def read_scheme(bval_path, bvec_path) -> DiffusionScheme:
    """Read b-values and gradients from the usual two text files.

    The b-value file holds one whitespace-separated value per volume.
    The gradient file is either 3 rows x N columns or N rows x 3 columns
    (auto-detected; the 3x3 ambiguity resolves to 3-rows-of-N).
    """
    bvals = np.loadtxt(bval_path).ravel()
    g = np.atleast_2d(np.loadtxt(bvec_path))
    if g.shape[0] == 3 and (g.shape[1] != 3 or bvals.size == 3):
        g = g.T
    elif g.shape[1] != 3:
        raise SchemeError(f"gradient table must be 3xN or Nx3, got {g.shape}")
    # re-normalize nonzero rows; files often carry rounded components
    norms = np.linalg.norm(g, axis=1)
    nz = norms > 0
    g = g.copy()
    g[nz] /= norms[nz, None]
    return DiffusionScheme(bvals, g)


def spiral_scheme(n_dirs: int = 25, n_b0: int = 3, b: float = 1000.0) -> DiffusionScheme:
    """Deterministic well-spread acquisition scheme for simulations.

    Directions follow a golden-angle spiral over the upper hemisphere
    (antipodal directions are equivalent for the tensor model).
    """
    golden = math.pi * (3.0 - math.sqrt(5.0))
    k = np.arange(n_dirs)
    z = 1.0 - (k + 0.5) / n_dirs  # upper hemisphere only
    r = np.sqrt(1.0 - z * z)
    theta = golden * k
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, float(b))])
    bvecs = np.concatenate([np.zeros((n_b0, 3)), dirs])
    return DiffusionScheme(bvals, bvecs)


@dataclass(frozen=True)
class TensorField:
    """Per-voxel diffusion tensor plus S0 estimate and validity flags.

    ``tensor`` is a 4D volume with 6 channels; ``s0`` is 3D; ``flags`` is
    3D uint8, nonzero where the tensor was zeroed (failed fit or outlier).
    """

    tensor: Volume
    s0: Volume
    flags: Volume

    def __post_init__(self):
        if self.tensor.data.ndim != 4 or self.tensor.n_channels != 6:
            raise ValueError("tensor volume must be 4D with 6 channels")
        if self.s0.spatial_dims != self.tensor.spatial_dims:
            raise ValueError("s0 grid does not match tensor grid")
        if self.flags.spatial_dims != self.tensor.spatial_dims:
            raise ValueError("flags grid does not match tensor grid")

    @property
    def spatial_dims(self):
        return self.tensor.spatial_dims


def design_matrix(scheme: DiffusionScheme) -> np.ndarray:
    """Log-signal model matrix, one row per volume, 7 columns.

    Row i acts on (ln S0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz):
    ``(1, -b gx^2, -2b gx gy, -2b gx gz, -b gy^2, -2b gy gz, -b gz^2)``.

    Raises:
        DegenerateScheme: column rank below 7.
    """
    b = scheme.bvals
    gx, gy, gz = scheme.bvecs.T
    x = np.column_stack([
        np.ones_like(b),
        -b * gx * gx,
        -2.0 * b * gx * gy,
        -2.0 * b * gx * gz,
        -b * gy * gy,
        -2.0 * b * gy * gz,
        -b * gz * gz,
    ])
    if np.linalg.matrix_rank(x) < 7:
        raise DegenerateScheme(
            f"{scheme.n_volumes} volumes span rank {np.linalg.matrix_rank(x)} < 7")
    return x


def _check_dwi(dwi: Volume, scheme: DiffusionScheme, mask: Mask) -> None:
    if dwi.data.ndim != 4 or dwi.n_channels != scheme.n_volumes:
        raise SchemeError(
            f"DWI has {dwi.n_channels} channels, scheme has {scheme.n_volumes}")
    if mask.spatial_dims != dwi.spatial_dims:
        raise SchemeError("mask grid does not match DWI grid")


def _tensor_field(dwi, d6, s0, flags, idx, shape) -> TensorField:
    """Scatter per-voxel results back into volumes; flagged voxels zeroed."""
    d6 = np.where(flags[:, None], 0.0, d6)
    s0 = np.where(flags, 0.0, s0)
    tensor = np.zeros(shape + (6,), dtype=np.float64)
    s0_vol = np.zeros(shape, dtype=np.float64)
    flag_vol = np.zeros(shape, dtype=np.uint8)
    tensor[idx] = d6
    s0_vol[idx] = s0
    flag_vol[idx] = flags.astype(np.uint8)
    mk = lambda arr: Volume(arr, voxel_size=dwi.voxel_size, affine=dwi.affine)
    return TensorField(mk(tensor), mk(s0_vol), mk(flag_vol))


def fit_loglinear(dwi: Volume, scheme: DiffusionScheme, mask: Mask) -> TensorField:
    """Ordinary least squares on log-signals, per masked voxel.

    Signals are clamped to a positive floor relative to the voxel's mean
    b=0 signal before the log.  Voxels with no usable signal are zeroed
    and flagged.
    """
    _check_dwi(dwi, scheme, mask)
    x = design_matrix(scheme)
    idx = np.nonzero(mask.data)
    signals = dwi.data[idx].astype(np.float64)  # (V, N)

    s0_est = signals[:, scheme.bvals == 0].mean(axis=1)
    bad = ~np.isfinite(signals).all(axis=1) | (s0_est <= 0)
    floor = np.maximum(LOG_FLOOR_FRACTION * s0_est[:, None], np.finfo(np.float64).tiny)
    logs = np.log(np.maximum(signals, floor))
    logs[bad] = 0.0

    coeffs, *_ = np.linalg.lstsq(x, logs.T, rcond=None)  # (7, V)
    s0 = np.exp(coeffs[0])
    d6 = coeffs[1:].T
    return _tensor_field(dwi, d6, s0, bad, idx, dwi.spatial_dims)


@dataclass(frozen=True)
class LmOptions:
    """Damped least-squares settings (conventional defaults)."""

    max_iter: int = 50
    tol: float = 1e-10          # relative cost decrease
    damping_init: float = 1e-3  # times diag(J^T J)
    damping_up: float = 10.0
    damping_down: float = 10.0


def fit_lm(dwi: Volume, scheme: DiffusionScheme, mask: Mask,
           init: TensorField, opts: LmOptions = LmOptions()) -> TensorField:
    """Refine the tensor fit by damped nonlinear least squares.

    Minimizes ``sum_i (S_i - S0 exp(-b_i g_i^T D g_i))^2`` per voxel with
    multiplicative damping: rejected steps raise the damping, accepted
    steps lower it.  Accepted steps never increase the cost, so the
    result is never worse than the initialization.  Voxels flagged by the
    initializer or carrying non-finite signal are skipped and flagged.
    """
    _check_dwi(dwi, scheme, mask)
    if init.spatial_dims != dwi.spatial_dims:
        raise SchemeError("init grid does not match DWI grid")
    q = design_matrix(scheme)[:, 1:]  # (N, 6): ln-signal slope per tensor element
    idx = np.nonzero(mask.data)
    y = dwi.data[idx].astype(np.float64)  # (V, N)

    flags = init.flags.data[idx].astype(bool) | ~np.isfinite(y).all(axis=1)
    theta = np.concatenate([init.s0.data[idx][:, None], init.tensor.data[idx]],
                           axis=1).astype(np.float64)  # (V, 7)

    def cost(th, y_rows):
        r = y_rows - th[:, :1] * np.exp(th[:, 1:] @ q.T)
        return (r * r).sum(axis=1)

    active = ~flags
    if opts.max_iter > 0 and active.any():
        lam = np.full(theta.shape[0], opts.damping_init)
        c = np.zeros(theta.shape[0])
        c[active] = cost(theta[active], y[active])
        eye7 = np.eye(7)
        for _ in range(opts.max_iter):
            th_a = theta[active]
            exp_term = np.exp(th_a[:, 1:] @ q.T)  # (Va, N)
            s = th_a[:, :1] * exp_term
            r = y[active] - s
            # J[v, i, p] = dS_i/dtheta_p
            j = np.empty(th_a.shape[:1] + (q.shape[0], 7))
            j[:, :, 0] = exp_term
            j[:, :, 1:] = s[:, :, None] * q[None, :, :]
            a = np.einsum("vip,viq->vpq", j, j)
            g = np.einsum("vip,vi->vp", j, r)
            diag = np.einsum("vpp->vp", a)
            floor = 1e-12 * diag.max(axis=1, keepdims=True) + 1e-300
            damp = lam[active, None] * np.maximum(diag, floor)  # (Va, 7)
            a_damped = a + damp[:, :, None] * eye7
            try:
                delta = np.linalg.solve(a_damped, g[..., None])[..., 0]
            except np.linalg.LinAlgError:
                delta = np.einsum("vpq,vq->vp", np.linalg.pinv(a_damped), g)
            trial = th_a + delta
            c_trial = cost(trial, y[active])
            c_act = c[active]
            accept = np.isfinite(c_trial) & (c_trial <= c_act)
            rel_drop = np.where(c_act > 0, (c_act - c_trial) / c_act, 0.0)

            th_new = np.where(accept[:, None], trial, th_a)
            theta[active] = th_new
            lam_act = lam[active]
            lam[active] = np.where(accept, lam_act / opts.damping_down,
                                   lam_act * opts.damping_up)
            c[active] = np.where(accept, c_trial, c_act)

            conv = accept & (rel_drop < opts.tol)
            stalled = ~accept & (lam[active] > 1e12)
            sub_active = ~(conv | stalled)
            act_idx = np.nonzero(active)[0]
            active[act_idx[~sub_active]] = False
            if not active.any():
                break

    return _tensor_field(dwi, theta[:, 1:], theta[:, 0], flags, idx,
                         dwi.spatial_dims)


def frobenius_norm(d6: np.ndarray) -> np.ndarray:
    """Full 3x3 matrix Frobenius norm of (..., 6) tensors.

    Off-diagonal elements count twice, matching ``||D||_F`` of the
    symmetric matrix rather than the plain 6-vector norm.
    """
    d6 = np.asarray(d6)
    sq = d6 * d6
    return np.sqrt(sq[..., 0] + sq[..., 3] + sq[..., 5]
                   + 2.0 * (sq[..., 1] + sq[..., 2] + sq[..., 4]))


def outlier_zero(t: TensorField, threshold: float = OUTLIER_NORM_THRESHOLD) -> TensorField:
    """Zero and flag voxels whose tensor norm exceeds the threshold.

    Idempotent: zeroed voxels have norm 0 and are never re-selected.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    norm = frobenius_norm(t.tensor.data)
    out = norm > threshold
    data = np.where(out[..., None], np.float32(0), t.tensor.data)
    flags = (t.flags.data.astype(bool) | out).astype(np.uint8)
    return TensorField(t.tensor.with_data(data), t.s0, t.flags.with_data(flags))


def normalize_values(values: np.ndarray) -> tuple[float, float]:
    """Joint mean and population std of a value set; raises on degeneracy."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ConstantField("need at least 2 values to normalize")
    mean = float(values.mean())
    std = float(values.std())  # population (biased)
    if std == 0.0:
        raise ConstantField("zero variance; cannot normalize")
    return mean, std


def normalize_scan(t: TensorField, mask: Mask) -> TensorField:
    """Scan-wise normalization of tensor magnitudes to zero mean, unit std.

    One mean and one standard deviation are computed jointly over all six
    channels of the masked voxels (not per channel), then applied to the
    whole tensor volume.
    """
    if mask.spatial_dims != t.spatial_dims:
        raise ValueError("mask grid does not match tensor grid")
    masked = t.tensor.data[mask.data.astype(bool)]
    mean, std = normalize_values(masked)
    data = ((t.tensor.data - mean) / std).astype(np.float32)
    return TensorField(t.tensor.with_data(data), t.s0, t.flags)


def simulate_dwi(d6: np.ndarray, scheme: DiffusionScheme, s0: float | np.ndarray = 1000.0,
                 rician_sigma: float = 0.0, rng: np.random.Generator | None = None,
                 voxel_size=(1.0, 1.0, 1.0)) -> Volume:
    """Forward-simulate DWI signals from tensors (the fit oracle).

    ``d6`` has shape (nx, ny, nz, 6).  With ``rician_sigma`` > 0, applies
    Rician noise: ``sqrt((S + n1)^2 + n2^2)`` with Gaussian n1, n2.
    """
    d6 = np.asarray(d6, dtype=np.float64)
    q = design_matrix(scheme)[:, 1:]
    s = np.asarray(s0, dtype=np.float64) * np.exp(d6 @ q.T)
    if rician_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        n1 = rng.normal(0.0, rician_sigma, s.shape)
        n2 = rng.normal(0.0, rician_sigma, s.shape)
        s = np.sqrt((s + n1) ** 2 + n2 ** 2)
    return Volume(s, voxel_size=voxel_size)
