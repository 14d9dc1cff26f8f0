"""Conditional coupling flow with rational-quadratic spline transforms.

Sampling pushes standard-normal noise ``z`` through the transforms in order;
``log_prob`` runs the inverse pass and accumulates log-determinants. Each
coupling transform leaves one parameter dimension unchanged (cycling through
the dimensions) and warps the others with monotone splines whose knots are
predicted from the unchanged dimension and the context.

Everything runs in float64.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

log = logging.getLogger(__name__)

DTYPE = torch.float64
FORMAT_VERSION = 1

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(0 + shift) + MIN_DERIVATIVE == 1, so zero parameters give unit slopes
_DERIV_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


class FlowError(RuntimeError):
    pass


class TrainingError(FlowError):
    pass


# --- rational-quadratic spline ------------------------------------------------


def n_spline_params(n_bins: int) -> int:
    return 3 * n_bins - 1


def _knots(params, n_bins, tail_bound):
    uw = params[..., :n_bins]
    uh = params[..., n_bins : 2 * n_bins]
    ud = params[..., 2 * n_bins :]

    def edges(unnorm, min_size):
        size = min_size + (1 - min_size * n_bins) * torch.softmax(unnorm, dim=-1)
        cum = F.pad(torch.cumsum(size, dim=-1), (1, 0), value=0.0)
        cum = 2 * tail_bound * cum - tail_bound
        cum[..., 0] = -tail_bound
        cum[..., -1] = tail_bound
        return cum, cum[..., 1:] - cum[..., :-1]

    cumw, widths = edges(uw, MIN_BIN_WIDTH)
    cumh, heights = edges(uh, MIN_BIN_HEIGHT)
    derivs = MIN_DERIVATIVE + F.softplus(F.pad(ud, (1, 1), value=0.0) + _DERIV_SHIFT)
    return cumw, widths, cumh, heights, derivs


def _gather(t, idx):
    return t.gather(-1, idx[..., None])[..., 0]


def _rqs(inputs, params, tail_bound, inverse):
    if not torch.all(torch.isfinite(params)):
        raise FlowError("spline parameters contain non-finite values")
    n_bins = (params.shape[-1] + 1) // 3
    if params.shape[-1] != n_spline_params(n_bins):
        raise FlowError(f"expected 3K-1 spline parameters, got {params.shape[-1]}")
    shape = torch.broadcast_shapes(inputs.shape, params.shape[:-1])
    inputs = inputs.expand(shape)
    params = params.expand(*shape, params.shape[-1])

    inside = (inputs >= -tail_bound) & (inputs <= tail_bound)
    outputs = inputs.clone()
    logdet = torch.zeros_like(inputs)
    if not inside.any():
        return outputs, logdet

    v = inputs[inside]
    cumw, widths, cumh, heights, derivs = _knots(params[inside], n_bins, tail_bound)

    knots = cumh if inverse else cumw
    # searchsorted needs the last edge nudged so v == tail_bound lands in the last bin
    search = knots.clone()
    search[..., -1] += 1e-9
    idx = (torch.searchsorted(search.contiguous(), v[:, None].contiguous(), right=True)[:, 0] - 1).clamp(0, n_bins - 1)

    x_k, w_k = _gather(cumw, idx), _gather(widths, idx)
    y_k, h_k = _gather(cumh, idx), _gather(heights, idx)
    d_k, d_k1 = _gather(derivs, idx), _gather(derivs[..., 1:], idx)
    s = h_k / w_k
    curv = d_k + d_k1 - 2 * s

    if inverse:
        dy = v - y_k
        a = h_k * (s - d_k) + dy * curv
        b = h_k * d_k - dy * curv
        c = -s * dy
        disc = (b * b - 4 * a * c).clamp_min(0.0)
        xi = (2 * c) / (-b - torch.sqrt(disc))
        out = xi * w_k + x_k
    else:
        xi = (v - x_k) / w_k
        num = h_k * (s * xi**2 + d_k * xi * (1 - xi))
        out = y_k + num / (s + curv * xi * (1 - xi))

    t = xi * (1 - xi)
    den = s + curv * t
    dnum = s**2 * (d_k1 * xi**2 + 2 * s * t + d_k * (1 - xi) ** 2)
    ld = torch.log(dnum) - 2 * torch.log(den)

    outputs = outputs.masked_scatter(inside, out)
    logdet = logdet.masked_scatter(inside, -ld if inverse else ld)
    return outputs, logdet


def rqs_forward(x, spline_params, tail_bound=5.0):
    """Monotone rational-quadratic spline on [-B, B], identity outside.

    ``spline_params`` holds K unnormalised widths, K unnormalised heights and
    K-1 unconstrained interior derivatives (last axis), broadcast against ``x``.
    Returns ``(y, log_det)`` with ``log_det`` summed over the last axis of ``x``.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    y, ld = _rqs(x, torch.as_tensor(spline_params, dtype=DTYPE), tail_bound, inverse=False)
    return y, ld.sum(-1)


def rqs_inverse(y, spline_params, tail_bound=5.0):
    """Exact inverse of :func:`rqs_forward` via the per-bin quadratic root."""
    y = torch.as_tensor(y, dtype=DTYPE)
    x, ld = _rqs(y, torch.as_tensor(spline_params, dtype=DTYPE), tail_bound, inverse=True)
    return x, ld.sum(-1)


# --- model ------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowConfig:
    n_transforms: int = 5
    hidden_units: int = 64
    hidden_layers: int = 1
    n_bins: int = 8
    tail_bound: float = 5.0
    context_dim: int = 1
    theta_dim: int = 3

    def __post_init__(self):
        if self.n_transforms < 1:
            raise ValueError("n_transforms must be >= 1")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if not self.tail_bound > 0:
            raise ValueError("tail_bound must be > 0")
        if self.theta_dim < 2:
            raise ValueError("coupling needs theta_dim >= 2")
        if self.hidden_units < 1 or self.hidden_layers < 1 or self.context_dim < 1:
            raise ValueError("hidden_units, hidden_layers and context_dim must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    batch_size: int = 1024
    learning_rate: float = 1e-3
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.max_epochs, self.batch_size, self.patience) < 1 or not self.learning_rate > 0:
            raise ValueError("max_epochs, batch_size, learning_rate and patience must be positive")


class Conditioner(nn.Module):
    """Fully connected net mapping (unchanged dims, context) to spline parameters."""

    def __init__(self, n_in, n_out, hidden_units, hidden_layers):
        super().__init__()
        sizes = [n_in] + [hidden_units] * hidden_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(sizes[:-1], sizes[1:]))
        self.out = nn.Linear(sizes[-1], n_out, dtype=DTYPE)

    def forward(self, x):
        for layer in self.hidden:
            x = torch.relu(layer(x))
        return self.out(x)


def coupling_masks(cfg: FlowConfig) -> list[int]:
    """Index of the dimension passed through unchanged by each transform."""
    return [t % cfg.theta_dim for t in range(cfg.n_transforms)]


class FlowModel(nn.Module):
    """Conditional density q(theta | h).

    With ``theta_bounds=(low, high)`` the parameters are first mapped to the
    real line by ``logit((theta - low) / (high - low))``, so samples always
    respect the prior box; standardisation is applied after that map.
    """

    def __init__(self, config: FlowConfig | None = None, seed: int = 0, theta_bounds=None):
        super().__init__()
        self.config = cfg = config or FlowConfig()
        self.bounded = theta_bounds is not None
        low, high = (np.zeros(cfg.theta_dim), np.ones(cfg.theta_dim)) if theta_bounds is None else theta_bounds
        low, high = np.asarray(low, dtype=float), np.asarray(high, dtype=float)
        if low.shape != (cfg.theta_dim,) or high.shape != (cfg.theta_dim,) or np.any(high <= low):
            raise ValueError("theta_bounds must be two length-theta_dim arrays with high > low")
        self.register_buffer("theta_low", torch.from_numpy(low.copy()))
        self.register_buffer("theta_high", torch.from_numpy(high.copy()))
        self.identity_dims = coupling_masks(cfg)
        n_out = (cfg.theta_dim - 1) * n_spline_params(cfg.n_bins)
        self.conditioners = nn.ModuleList(
            Conditioner(1 + cfg.context_dim, n_out, cfg.hidden_units, cfg.hidden_layers) for _ in range(cfg.n_transforms)
        )
        self.register_buffer("theta_mean", torch.zeros(cfg.theta_dim, dtype=DTYPE))
        self.register_buffer("theta_std", torch.ones(cfg.theta_dim, dtype=DTYPE))
        self.register_buffer("context_mean", torch.zeros(cfg.context_dim, dtype=DTYPE))
        self.register_buffer("context_std", torch.ones(cfg.context_dim, dtype=DTYPE))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        """Uniform(+-1/sqrt(fan_in)) hidden weights; zero output layers so every transform starts as the identity."""
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for cond in self.conditioners:
                for layer in cond.hidden:
                    bound = 1 / math.sqrt(layer.in_features)
                    layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, layer.weight.shape)))
                    layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, layer.bias.shape)))
                cond.out.weight.zero_()
                cond.out.bias.zero_()

    # standardisation ------------------------------------------------------------

    def set_standardization(self, theta_mean, theta_std, context_mean, context_std) -> None:
        with torch.no_grad():
            self.theta_mean.copy_(torch.as_tensor(theta_mean, dtype=DTYPE))
            self.theta_std.copy_(torch.as_tensor(theta_std, dtype=DTYPE))
            self.context_mean.copy_(torch.as_tensor(np.atleast_1d(context_mean), dtype=DTYPE))
            self.context_std.copy_(torch.as_tensor(np.atleast_1d(context_std), dtype=DTYPE))

    def featurize_context(self, h):
        """Raw relative power h -> standardised log h, shape (n, context_dim)."""
        h = torch.as_tensor(np.array(h, dtype=float), dtype=DTYPE).reshape(-1, self.config.context_dim)
        if torch.any(h <= 0) or not torch.all(torch.isfinite(h)):
            raise ValueError("h must be finite and strictly positive")
        return (torch.log(h) - self.context_mean) / self.context_std

    def unbound(self, theta):
        """Physical parameters -> flow coordinates before standardisation, plus log|Jacobian|."""
        theta = torch.as_tensor(np.array(theta, dtype=float), dtype=DTYPE).reshape(-1, self.config.theta_dim)
        if not self.bounded:
            return theta, torch.zeros(theta.shape[0], dtype=DTYPE)
        width = self.theta_high - self.theta_low
        u = (theta - self.theta_low) / width
        inside = torch.all((u > 0) & (u < 1), dim=1)
        u = u.clamp(1e-300, 1 - 1e-16)
        x = torch.log(u) - torch.log1p(-u)
        logjac = -(torch.log(u) + torch.log1p(-u) + torch.log(width)).sum(-1)
        return x, torch.where(inside, logjac, torch.full_like(logjac, -math.inf))

    def standardize(self, theta):
        x, _ = self.unbound(theta)
        return (x - self.theta_mean) / self.theta_std

    def destandardize(self, x):
        x = x * self.theta_std + self.theta_mean
        if self.bounded:
            x = self.theta_low + (self.theta_high - self.theta_low) * torch.sigmoid(x)
        return x

    # transforms -----------------------------------------------------------------

    def _spline_params(self, t, x, context):
        keep = self.identity_dims[t]
        raw = self.conditioners[t](torch.cat([x[:, keep : keep + 1], context], dim=1))
        return keep, raw.reshape(x.shape[0], self.config.theta_dim - 1, n_spline_params(self.config.n_bins))

    def _transform(self, t, x, context, inverse):
        keep, params = self._spline_params(t, x, context)
        moved = [d for d in range(self.config.theta_dim) if d != keep]
        y, ld = _rqs(x[:, moved], params, self.config.tail_bound, inverse=inverse)
        if not torch.all(torch.isfinite(y)):
            raise FlowError(f"non-finite output in transform {t}")
        out = x.clone()
        out[:, moved] = y
        return out, ld.sum(-1)

    def forward_transform(self, z, context):
        """Base noise -> standardised parameters. Returns (x, summed log-det)."""
        total = torch.zeros(z.shape[0], dtype=DTYPE)
        for t in range(self.config.n_transforms):
            z, ld = self._transform(t, z, context, inverse=False)
            total = total + ld
        return z, total

    def inverse_transform(self, x, context):
        """Standardised parameters -> base noise. Returns (z, summed log-det)."""
        total = torch.zeros(x.shape[0], dtype=DTYPE)
        for t in reversed(range(self.config.n_transforms)):
            x, ld = self._transform(t, x, context, inverse=True)
            total = total + ld
        return x, total

    def log_prob_standardized(self, x, context):
        x = torch.as_tensor(x, dtype=DTYPE)
        context = torch.as_tensor(context, dtype=DTYPE).reshape(x.shape[0], -1)
        z, ld = self.inverse_transform(x, context)
        base = -0.5 * (z**2).sum(-1) - 0.5 * self.config.theta_dim * math.log(2 * math.pi)
        return base + ld

    def log_prob(self, theta, h):
        """log q(theta | h) in physical units, including the standardisation Jacobian."""
        u, logjac = self.unbound(theta)
        x = (u - self.theta_mean) / self.theta_std
        ctx = self.featurize_context(np.broadcast_to(np.asarray(h, dtype=float), (x.shape[0],)))
        return self.log_prob_standardized(x, ctx) - torch.log(self.theta_std).sum() + logjac

    @torch.no_grad()
    def sample(self, h: float, n: int, seed: int) -> np.ndarray:
        """Draw ``n`` posterior samples for a single context value, in physical units."""
        if n < 1:
            raise ValueError("n must be >= 1")
        z = torch.from_numpy(np.random.default_rng(seed).standard_normal((n, self.config.theta_dim)))
        ctx = self.featurize_context(np.full(n, float(h)))
        x, _ = self.forward_transform(z, ctx)
        return self.destandardize(x).numpy()

    def context_envelope(self, h) -> float:
        """How many training standard deviations log h sits from the training mean."""
        return float(torch.abs(self.featurize_context(h)).max())


def flow_log_prob(model: FlowModel, theta_std, context_std):
    """log q(theta | context) for already-standardised theta and context."""
    return model.log_prob_standardized(theta_std, context_std)


def flow_sample(model: FlowModel, h: float, n: int, seed: int) -> np.ndarray:
    return model.sample(h, n, seed)


# --- training -------------------------------------------------------------------


def _nll(model, x, ctx):
    return -model.log_prob_standardized(x, ctx).mean()


@torch.no_grad()
def _eval_nll(model, x, ctx, chunk=8192):
    total = 0.0
    for s in range(0, x.shape[0], chunk):
        total += float(-model.log_prob_standardized(x[s : s + chunk], ctx[s : s + chunk]).sum())
    return total / x.shape[0]


def train_flow(train, val, flow_cfg: FlowConfig | None = None, train_cfg: TrainConfig | None = None, theta_bounds=None):
    """Fit a FlowModel by maximum likelihood with Adam and early stopping.

    ``train`` and ``val`` are objects with ``theta`` (n, 3) and ``h`` (n,) arrays
    (e.g. :class:`rsnpe.datagen.PairSet`). Returns ``(model, history)`` where the
    model holds the parameters of the epoch with the lowest validation loss and
    ``history`` is a list of ``{"epoch", "train_nll", "val_nll"}`` dicts.
    ``theta_bounds`` enables the bounded parameterisation of :class:`FlowModel`.
    """
    flow_cfg = flow_cfg or FlowConfig()
    train_cfg = train_cfg or TrainConfig()
    if len(train.h) == 0 or len(val.h) == 0:
        raise ValueError("train and validation splits must be non-empty")

    model = FlowModel(flow_cfg, seed=train_cfg.seed, theta_bounds=theta_bounds)
    theta, logjac = model.unbound(train.theta)
    if not torch.all(torch.isfinite(logjac)):
        raise ValueError("training parameters fall outside theta_bounds")
    theta = theta.numpy()
    log_h = np.log(np.asarray(train.h, dtype=float))
    if not np.all(np.isfinite(log_h)):
        raise ValueError("training h values must be strictly positive")
    theta_std = theta.std(axis=0)
    ctx_std = log_h.std()
    model.set_standardization(
        theta.mean(axis=0), np.where(theta_std > 0, theta_std, 1.0), log_h.mean(), ctx_std if ctx_std > 0 else 1.0
    )

    x_tr, c_tr = model.standardize(train.theta), model.featurize_context(train.h)
    x_va, c_va = model.standardize(val.theta), model.featurize_context(val.h)

    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(train_cfg.seed)
    n = x_tr.shape[0]
    history = []
    best_val, best_state, stale = math.inf, copy.deepcopy(model.state_dict()), 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        perm = torch.from_numpy(rng.permutation(n))
        running = 0.0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = perm[start : start + train_cfg.batch_size]
            try:
                loss = _nll(model, x_tr[idx], c_tr[idx])
            except FlowError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        val_nll = _eval_nll(model, x_va, c_va)
        if not math.isfinite(val_nll):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_nll": running / n, "val_nll": val_nll})
        log.info("epoch %d train %.4f val %.4f", epoch, running / n, val_nll)
        if val_nll < best_val:
            best_val, best_state, stale = val_nll, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    return model, history


# --- persistence ----------------------------------------------------------------


def parameter_order(model: FlowModel) -> list[str]:
    """Traversal order of the flat weight file: per transform, each hidden layer's
    weight (out x in, row-major) then bias, then the output layer's weight and bias."""
    names = []
    for t, cond in enumerate(model.conditioners):
        for i in range(len(cond.hidden)):
            names += [f"conditioners.{t}.hidden.{i}.weight", f"conditioners.{t}.hidden.{i}.bias"]
        names += [f"conditioners.{t}.out.weight", f"conditioners.{t}.out.bias"]
    return names


def save_model(path, model: FlowModel, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 weights)."""
    path = Path(path)
    params = dict(model.named_parameters())
    order = parameter_order(model)
    blob = np.concatenate([params[k].detach().numpy().ravel() for k in order]).astype("<f8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "identity_dims": model.identity_dims,
        "theta_bounds": [model.theta_low.tolist(), model.theta_high.tolist()] if model.bounded else None,
        "theta_mean": model.theta_mean.tolist(),
        "theta_std": model.theta_std.tolist(),
        "context_feature": "standardized log(h)",
        "context_mean": model.context_mean.tolist(),
        "context_std": model.context_std.tolist(),
        "weights": {"dtype": "<f8", "order": order, "shapes": [list(params[k].shape) for k in order], "count": int(blob.size)},
        **(extra or {}),
    }
    path.with_name(path.name + ".bin").write_bytes(blob.tobytes())
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2))


def load_model(path) -> FlowModel:
    path = Path(path)
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FlowError(f"unsupported model format {manifest.get('format_version')}")
    model = FlowModel(FlowConfig(**manifest["config"]), theta_bounds=manifest.get("theta_bounds"))
    blob = np.frombuffer(path.with_name(path.name + ".bin").read_bytes(), dtype="<f8")
    if blob.size != manifest["weights"]["count"]:
        raise FlowError("weight file size does not match manifest")
    params = dict(model.named_parameters())
    offset = 0
    with torch.no_grad():
        for name, shape in zip(manifest["weights"]["order"], manifest["weights"]["shapes"]):
            size = int(np.prod(shape))
            params[name].copy_(torch.from_numpy(blob[offset : offset + size].reshape(shape).copy()))
            offset += size
    model.set_standardization(
        manifest["theta_mean"], manifest["theta_std"], manifest["context_mean"], manifest["context_std"]
    )
    model.eval()
    return model
