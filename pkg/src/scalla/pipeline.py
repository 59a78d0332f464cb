"""Experiment pipeline stages shared by the CLI and the test harness."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ConfigError, ExperimentConfig
from .data import Dataset, load_idx, make_blobs, make_ring_ood, make_two_moons, normalize
from .diff import forward_batch
from .likelihoods import SoftmaxLikelihood, softmax
from .lla import (
    ExactPosterior,
    curvature,
    default_prior_grid,
    fit_exact,
    tune_prior,
)
from .metrics import (
    accuracy,
    auc_roc,
    ece,
    gaussian_entropy,
    nll,
    softmax_entropy,
    softmax_probs_mc,
)
from .models import MapResult, OptimizerConfig, train_map
from .network import Conv2d, Dense, Flatten, NetworkSpec, Relu, Tanh, mlp_spec
from .surrogate import (
    SurrogateConfig,
    SurrogateResult,
    surrogate_posterior,
    train_surrogate,
)


def build_datasets(cfg: ExperimentConfig) -> dict[str, Dataset]:
    """Deterministic splits per (config, seed); rings sit around the train centroid."""
    ds = cfg.dataset
    if ds.kind == "idx":
        return _build_idx_datasets(cfg)
    if ds.kind == "two_moons":
        train = make_two_moons(ds.n_train, ds.noise, (cfg.seed, 10))
        test_ds = make_two_moons(ds.n_test, ds.noise, (cfg.seed, 11))
        test_ds = Dataset(test_ds.inputs, test_ds.labels, "test")
    elif ds.kind == "blobs":
        centers = ((-2.0, 0.0), (2.0, 0.0))
        train = make_blobs(ds.n_train, centers, (cfg.seed, 10), cluster_std=ds.noise)
        test_raw = make_blobs(ds.n_test, centers, (cfg.seed, 11), cluster_std=ds.noise)
        test_ds = Dataset(test_raw.inputs, test_raw.labels, "test")
    center = train.inputs.mean(axis=0)
    context = make_ring_ood(ds.n_context, ds.context_radius, (cfg.seed, 12), center, role="context")
    ood = make_ring_ood(ds.n_ood, ds.ood_radius, (cfg.seed, 13), center, role="ood")
    splits = {"train": train, "test": test_ds, "context": context, "ood": ood}
    if ds.normalize:
        splits = {name: normalize(split, train) for name, split in splits.items()}
    return splits


def _build_idx_datasets(cfg: ExperimentConfig) -> dict[str, Dataset]:
    ds = cfg.dataset
    root = Path(cfg.data_root())
    pairs = {
        "train": (ds.train_images, ds.train_labels),
        "test": (ds.test_images, ds.test_labels),
        "context": (ds.context_images, ds.context_labels),
        "ood": (ds.ood_images, ds.ood_labels),
    }
    splits = {}
    for role, (images, labels) in pairs.items():
        if not images or not labels:
            continue
        images_path, labels_path = root / images, root / labels
        for path in (images_path, labels_path):
            if not path.exists():
                raise ConfigError(f"dataset not found: {path}")
        splits[role] = load_idx(images_path, labels_path, role)
    if "train" not in splits or "test" not in splits:
        raise ConfigError("idx datasets need at least train and test image/label paths")
    return splits


def build_network(cfg: ExperimentConfig, input_shape: tuple[int, ...]) -> NetworkSpec:
    model = cfg.model
    if model.arch == "mlp":
        in_dim = int(np.prod(input_shape))
        return mlp_spec(in_dim, model.hidden, model.n_classes, model.activation)
    act = {"tanh": Tanh, "relu": Relu}[model.activation]
    layers = []
    channels, h, w = input_shape
    for out_channels, kernel in model.conv:
        layers.extend([Conv2d(channels, out_channels, kernel), act()])
        channels, h, w = out_channels, h - kernel + 1, w - kernel + 1
    layers.append(Flatten())
    dim = channels * h * w
    for width in model.hidden:
        layers.extend([Dense(dim, width), act()])
        dim = width
    layers.append(Dense(dim, model.n_classes))
    return NetworkSpec(tuple(layers), input_shape, model.n_classes)


def dataset_identifier(cfg: ExperimentConfig, role: str) -> str:
    ds = cfg.dataset
    if ds.kind == "idx":
        images = getattr(ds, f"{role}_images", "")
        return f"idx:{images}"
    if role == "context":
        return f"{ds.kind}:ring(radius={ds.context_radius}, n={ds.n_context})"
    if role == "ood":
        return f"{ds.kind}:ring(radius={ds.ood_radius}, n={ds.n_ood})"
    return f"{ds.kind}(n={getattr(ds, 'n_' + role)}, noise={ds.noise})"


def run_train_map(cfg: ExperimentConfig, splits: dict[str, Dataset]) -> tuple[NetworkSpec, MapResult]:
    spec = build_network(cfg, splits["train"].inputs.shape[1:])
    opt = OptimizerConfig(
        steps=cfg.map.steps,
        batch_size=cfg.map.batch_size,
        learning_rate=cfg.map.learning_rate,
        seed=cfg.seed,
    )
    result = train_map(spec, splits["train"], cfg.map.sigma0, opt)
    return spec, result


def resolve_sigma0(cfg: ExperimentConfig, spec: NetworkSpec, theta, train: Dataset) -> float:
    if cfg.prior.sigma0 != "auto":
        return float(cfg.prior.sigma0)
    grid = np.logspace(
        np.log10(cfg.prior.grid_min), np.log10(cfg.prior.grid_max), cfg.prior.grid_points
    )
    return tune_prior(spec, SoftmaxLikelihood(), train, theta, grid)


def run_fit_surrogate(
    cfg: ExperimentConfig,
    spec: NetworkSpec,
    theta,
    splits: dict[str, Dataset],
    biased: bool,
    seed_offset: int = 0,
) -> SurrogateResult:
    s = cfg.surrogate
    context = splits.get("context")
    train_cfg = SurrogateConfig(
        m=s.m,
        steps=s.steps,
        batch_size=s.batch_size,
        context_batch_size=s.context_batch_size,
        learning_rate=s.learning_rate,
        seed=cfg.seed + seed_offset,
        biased=biased,
        sketches_per_step=s.sketches_per_step,
        distribution=s.distribution,
    )
    context_inputs = context.inputs if context is not None else None
    return train_surrogate(spec, theta, splits["train"].inputs, train_cfg, context_inputs)


@dataclass
class MethodReport:
    method: str
    acc: float
    nll: float
    ece: float
    auc: float
    gauss_auc: float | None


def _predictive_scores(posterior, inputs, mc_samples: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-input MC softmax probabilities, softmax-entropy and Gaussian-entropy scores."""
    probs, s_entropy, g_entropy = [], [], []
    for i, x in enumerate(inputs):
        pred = posterior.predictive(x)
        p = softmax_probs_mc(pred, mc_samples, (seed, i))
        probs.append(p)
        s_entropy.append(softmax_entropy(p))
        g_entropy.append(gaussian_entropy(pred))
    return np.asarray(probs), np.asarray(s_entropy), np.asarray(g_entropy)


def evaluate_method(
    method: str,
    cfg: ExperimentConfig,
    spec: NetworkSpec,
    theta,
    splits: dict[str, Dataset],
    posterior=None,
) -> MethodReport:
    test_ds, ood = splits["test"], splits.get("ood")
    mc, bins = cfg.evaluation.mc_samples, cfg.evaluation.ece_bins
    if method == "map":
        probs = softmax(forward_batch(spec, theta, test_ds.inputs))
        scores_test = softmax_entropy(probs)
        scores_ood = (
            softmax_entropy(softmax(forward_batch(spec, theta, ood.inputs))) if ood else None
        )
        gauss_auc = None
    else:
        probs, scores_test, gauss_test = _predictive_scores(
            posterior, test_ds.inputs, mc, (cfg.seed, 20)
        )
        gauss_auc = None
        scores_ood = None
        if ood is not None:
            _, scores_ood, gauss_ood = _predictive_scores(posterior, ood.inputs, mc, (cfg.seed, 21))
            gauss_auc = auc_roc(gauss_test, gauss_ood)
    auc = auc_roc(scores_test, scores_ood) if scores_ood is not None else float("nan")
    return MethodReport(
        method=method,
        acc=accuracy(probs, test_ds.labels),
        nll=nll(probs, test_ds.labels),
        ece=ece(probs, test_ds.labels, bins),
        auc=auc,
        gauss_auc=gauss_auc,
    )


def exact_posterior_for(cfg, spec, theta, train: Dataset, sigma0: float) -> ExactPosterior:
    return fit_exact(spec, SoftmaxLikelihood(), theta, train, sigma0)


def feature_posterior_for(cfg, spec, theta, surrogate, train: Dataset, sigma0: float):
    likelihood = SoftmaxLikelihood()
    fs = forward_batch(spec, theta, train.inputs)
    curvatures = [curvature(likelihood, y, f) for y, f in zip(train.labels, fs)]
    return surrogate_posterior(spec, theta, surrogate, train.inputs, curvatures, sigma0)


def format_report(reports: list[MethodReport]) -> str:
    """Fixed-width table mirroring the evaluation columns."""
    header = f"{'method':<14}{'ACC':>8}{'NLL':>10}{'ECE':>10}{'AUC':>10}{'GAUSS-AUC':>12}"
    lines = [header]
    for r in reports:
        gauss = "--" if r.gauss_auc is None else f"{r.gauss_auc:.4f}"
        auc = "--" if np.isnan(r.auc) else f"{r.auc:.4f}"
        lines.append(
            f"{r.method:<14}{100.0 * r.acc:>8.2f}{r.nll:>10.4f}{r.ece:>10.4f}{auc:>10}{gauss:>12}"
        )
    return "\n".join(lines) + "\n"


def report_key_values(reports: list[MethodReport]) -> str:
    lines = []
    for r in reports:
        lines.append(f"{r.method}.acc = {r.acc!r}")
        lines.append(f"{r.method}.nll = {r.nll!r}")
        lines.append(f"{r.method}.ece = {r.ece!r}")
        if not np.isnan(r.auc):
            lines.append(f"{r.method}.auc = {r.auc!r}")
        if r.gauss_auc is not None:
            lines.append(f"{r.method}.gauss_auc = {r.gauss_auc!r}")
    return "\n".join(lines) + "\n"
