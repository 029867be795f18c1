"""Independent reference implementations used as test oracles.

Everything here deliberately avoids the package's code paths: scalar
python arithmetic, matrices derived from first principles, exhaustive
searches, numpy SVD, and central finite differences.
"""

from __future__ import annotations

import math

import numpy as np
import torch

# --- scalar sRGB -> CIELAB ------------------------------------------------
# The RGB->XYZ matrix is derived from the sRGB primary chromaticities and
# the D65 white point instead of using pinned literals.

_PRIMARIES = ((0.64, 0.33), (0.30, 0.60), (0.15, 0.06))
_WHITE = (0.95047, 1.0, 1.08883)


def _solve3(a, rhs):
    det = (
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    )
    out = []
    for col in range(3):
        m = [[a[r][c] if c != col else rhs[r] for c in range(3)] for r in range(3)]
        det_col = (
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        )
        out.append(det_col / det)
    return out


def _rgb_to_xyz_matrix():
    cols = [[x / y, 1.0, (1.0 - x - y) / y] for x, y in _PRIMARIES]
    p = [[cols[j][i] for j in range(3)] for i in range(3)]
    s = _solve3(p, list(_WHITE))
    return [[p[i][j] * s[j] for j in range(3)] for i in range(3)]


_M = _rgb_to_xyz_matrix()


def _linearize(v: float) -> float:
    if v <= 0.04045:
        return v / 12.92
    return ((v + 0.055) / 1.055) ** 2.4


def _f(t: float) -> float:
    if t > 216.0 / 24389.0:
        return t ** (1.0 / 3.0)
    return (24389.0 / 27.0 * t + 16.0) / 116.0


def rgb_to_lab_scalar(r: float, g: float, b: float) -> tuple[float, float, float]:
    rl, gl, bl = _linearize(r), _linearize(g), _linearize(b)
    xyz = [_M[i][0] * rl + _M[i][1] * gl + _M[i][2] * bl for i in range(3)]
    fx = _f(xyz[0] / _WHITE[0])
    fy = _f(xyz[1] / _WHITE[1])
    fz = _f(xyz[2] / _WHITE[2])
    return 116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)


def lab_image_scalar(img: np.ndarray) -> np.ndarray:
    """Pixel-by-pixel scalar conversion of an (H, W, 3) image."""
    h, w, _ = img.shape
    out = np.zeros((h, w, 3), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            out[i, j] = rgb_to_lab_scalar(*(float(v) for v in img[i, j]))
    return out


def region_rmse_scalar(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """Spreadsheet-style recomputation of the region RMSE triple."""
    lab_p = lab_image_scalar(pred)
    lab_g = lab_image_scalar(gt)
    sums = {0: [0.0, 0], 1: [0.0, 0]}
    h, w, _ = pred.shape
    for i in range(h):
        for j in range(w):
            se = sum((lab_g[i, j, c] - lab_p[i, j, c]) ** 2 for c in range(3)) / 3.0
            bucket = sums[int(mask[i, j])]
            bucket[0] += se
            bucket[1] += 1
    mse_s = sums[1][0] / sums[1][1] if sums[1][1] else None
    mse_n = sums[0][0] / sums[0][1] if sums[0][1] else None
    if mse_s is None:
        mse_all = mse_n
    elif mse_n is None:
        mse_all = mse_s
    else:
        mse_all = (sums[1][1] * mse_s + sums[0][1] * mse_n) / (sums[1][1] + sums[0][1])
    sq = lambda v: None if v is None else math.sqrt(v)
    return sq(mse_s), sq(mse_n), sq(mse_all)


# --- exhaustive Otsu ---------------------------------------------------------


def otsu_exhaustive(score: np.ndarray, candidates: int = 1024) -> float:
    """Best threshold by direct between-class variance maximization over a
    dense grid of candidate thresholds (pixels above are foreground)."""
    flat = score.ravel().astype(np.float64)
    lo, hi = flat.min(), flat.max()
    best_t, best_var = lo, -1.0
    for t in np.linspace(lo, hi, candidates, endpoint=False):
        fg = flat > t
        n1 = fg.sum()
        n0 = flat.size - n1
        if n0 == 0 or n1 == 0:
            continue
        mu0 = flat[~fg].mean()
        mu1 = flat[fg].mean()
        var = n0 * n1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_t = var, t
    return float(best_t)


# --- confusion matrix --------------------------------------------------------


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> dict[str, int]:
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g and p:
            tp += 1
        elif g and not p:
            fn += 1
        elif not g and p:
            fp += 1
        else:
            tn += 1
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


# --- linear algebra / gradients ----------------------------------------------


def top_singular_value(w: np.ndarray) -> float:
    return float(np.linalg.svd(np.asarray(w, dtype=np.float64), compute_uv=False)[0])


def sample_param_coords(params, grads, n_samples: int, rng: np.random.Generator):
    """(tensor, flat_index) pairs: the strongest-gradient coordinates plus
    a couple of random ones for breadth. Checking where the gradient is
    largest is what makes the comparison informative; uniformly random
    coordinates mostly land on numerically negligible entries."""
    candidates = []
    for tensor, grad in zip(params, grads):
        if grad is None or tensor.numel() == 0:
            continue
        flat = grad.reshape(-1).abs()
        k = min(max(1, n_samples), flat.numel())
        top = torch.topk(flat, k)
        for idx in top.indices.tolist():
            candidates.append((float(flat[idx]), tensor, idx))
    candidates.sort(key=lambda c: -c[0])
    coords = [(t, i) for _, t, i in candidates[:n_samples]]
    live = [t for t in params if t.numel() > 0]
    for _ in range(2):
        t = live[int(rng.integers(len(live)))]
        coords.append((t, int(rng.integers(t.numel()))))
    return coords


def check_grads_against_fd(
    loss_fn,
    params: list[torch.Tensor],
    n_samples: int = 8,
    h: float = 1e-6,
    rel_tol: float = 1e-3,
    abs_floor: float = 1e-7,
    seed: int = 0,
) -> float:
    """Central finite differences on sampled coordinates vs autograd.

    loss_fn recomputes the scalar loss from the current parameter values.
    Returns the worst relative error seen; raises AssertionError beyond
    rel_tol. Coordinates whose finite-difference signal sits below the
    float64 resolution of the loss itself (cancellation noise) are
    compared against that noise floor instead of rel_tol.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    pos_by_id = {id(p): i for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    coords = sample_param_coords(params, grads, n_samples, rng)
    worst = 0.0
    compared = 0
    for tensor, idx in coords:
        grad = grads[pos_by_id[id(tensor)]]
        g_ad = 0.0 if grad is None else float(grad.reshape(-1)[idx])
        flat = tensor.detach().reshape(-1)
        orig = float(flat[idx])
        step = h * max(1.0, abs(orig))
        with torch.no_grad():
            flat[idx] = orig + step
        lp = float(loss_fn().detach())
        with torch.no_grad():
            flat[idx] = orig - step
        lm = float(loss_fn().detach())
        with torch.no_grad():
            flat[idx] = orig
        g_fd = (lp - lm) / (2.0 * step)
        scale = max(abs(g_ad), abs(g_fd))
        if scale < abs_floor:
            continue
        # difference of two nearly equal losses: anything below this is
        # float64 cancellation, not gradient error
        fd_noise = 100.0 * np.spacing(max(1.0, abs(lp), abs(lm))) / (2.0 * step)
        compared += 1
        if abs(g_ad - g_fd) <= fd_noise:
            continue
        rel = abs(g_ad - g_fd) / scale
        worst = max(worst, rel)
        assert rel < rel_tol, f"gradient mismatch: autodiff {g_ad} vs fd {g_fd} (rel {rel:.2e})"
    assert compared >= max(1, n_samples // 2), (
        f"only {compared}/{n_samples} coordinates had a measurable gradient signal"
    )
    return worst
