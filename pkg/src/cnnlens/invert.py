"""Gradient-based image synthesis: feature inversion and class visualization.

Two data terms share one optimizer:

- feature matching: minimize ``||phi(I) - target||^2 / ||target||^2`` for the
  activations of a chosen layer;
- class score: maximize the logit of a chosen class, optionally through an
  imposed pathway mask.

Both are regularized by ``R(I) = a*||I||^2 + b*||grad I||^2 + g*sum_p
||normalized_patch_p(I) - matched_db_patch_p||^2``.  The patch term holds the
matched database patches fixed during continuous steps and re-matches them
every few iterations; a re-match can only tighten the term because each patch
is replaced by a nearest neighbor.

Optimization runs in whitened space (per-channel dataset standardization)
when dataset statistics are supplied; the network always sees the unwhitened
image.  The regularizer is applied to the optimization variable itself, and
the patch term is indifferent to the change of variables because patch
normalization cancels per-channel affine maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetStats
from .errors import DivergenceError, ValidationError
from .net import MaskSet, backward_to_input, forward
from .patches import PatchDatabase, image_stats, match, patch_grid, retrieval_init

__all__ = [
    "InversionConfig",
    "InversionResult",
    "FeatureObjective",
    "ClassObjective",
    "data_energy_inversion",
    "data_score_class",
    "regularizer",
    "whiten",
    "unwhiten",
    "invert",
    "relative_l2",
]

INIT_MODES = ("mean", "mean+noise", "given-image", "channel-shuffled", "retrieval")


@dataclass(frozen=True)
class InversionConfig:
    r_alpha: float = 1e-6
    r_beta: float = 1e-5
    r_gamma: float = 0.0
    step_size: float = 8.0
    momentum: float = 0.95
    iterations: int = 500
    rematch_interval: int = 50
    seed: int = 0
    init_mode: str = "mean+noise"
    noise_scale: float = 0.1
    channel_perm: tuple | None = None
    patch_stride: int | None = None
    retrieval_k: int = 10
    divergence_limit: float = 1e12

    def __post_init__(self):
        for name in ("r_alpha", "r_beta", "r_gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.rematch_interval < 1:
            raise ValidationError("rematch_interval must be >= 1")
        if self.step_size <= 0:
            raise ValidationError("step_size must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValidationError(f"unknown init_mode {self.init_mode!r}")


@dataclass(frozen=True)
class FeatureObjective:
    """Match the activations of layer ``layer_index`` to ``target``."""

    layer_index: int
    target: np.ndarray


@dataclass(frozen=True)
class ClassObjective:
    """Drive the logit of ``class_index`` up, through optional mask overrides."""

    class_index: int
    overrides: MaskSet | None = None


@dataclass
class InversionResult:
    image: np.ndarray
    energy_trace: np.ndarray            # (iterations, 2): data term, regularizer
    final_feature_error: float | None   # None for class objectives
    nn_field: object = None
    rematch_trace: list = field(default_factory=list)  # (iter, before, after)


# ---------------------------------------------------------------------------
# data terms


def data_energy_inversion(image, weights, spec, layer_index, target):
    """Relative feature reconstruction error and its image gradient."""
    target = np.asarray(target, dtype=np.float64)
    tnorm = float((target ** 2).sum())
    if tnorm == 0.0:
        raise ValidationError("target feature must be nonzero")
    trace = forward(weights, spec, image)
    phi = trace.activation(layer_index)
    if phi.shape != target.shape:
        raise ValidationError(
            f"target shape {target.shape} does not match layer {layer_index} "
            f"output {phi.shape}"
        )
    diff = phi - target
    energy = float((diff ** 2).sum()) / tnorm
    grad = backward_to_input(trace, weights, spec, 2.0 * diff / tnorm, from_layer=layer_index)
    return energy, grad


def data_score_class(image, weights, spec, class_index, overrides=None):
    """Selected logit and its image gradient under the given overrides."""
    if not 0 <= class_index < spec.class_count:
        raise ValidationError(f"class {class_index} out of range")
    trace = forward(weights, spec, image, overrides=overrides)
    onehot = np.zeros(spec.class_count)
    onehot[class_index] = 1.0
    score = float(trace.logits[class_index])
    grad = backward_to_input(trace, weights, spec, onehot)
    return score, grad


def feature_error(image, weights, spec, layer_index, target) -> float:
    """Relative feature reconstruction error: ``||phi - target||^2 / ||target||^2``."""
    target = np.asarray(target, dtype=np.float64)
    phi = forward(weights, spec, image).activation(layer_index)
    return float(((phi - target) ** 2).sum() / (target ** 2).sum())


# ---------------------------------------------------------------------------
# regularizer


def _alpha_term(image, weight):
    energy = weight * float((image ** 2).sum())
    return energy, 2.0 * weight * image


def _beta_term(image, weight):
    # forward differences, zero across the boundary
    dr = np.zeros_like(image)
    dc = np.zeros_like(image)
    dr[:-1] = image[1:] - image[:-1]
    dc[:, :-1] = image[:, 1:] - image[:, :-1]
    energy = weight * float((dr ** 2).sum() + (dc ** 2).sum())
    grad = np.zeros_like(image)
    grad[:-1] -= 2.0 * dr[:-1]
    grad[1:] += 2.0 * dr[:-1]
    grad[:, :-1] -= 2.0 * dc[:, :-1]
    grad[:, 1:] += 2.0 * dc[:, :-1]
    return energy, weight * grad


def _patch_term(image, weight, db, nn_field):
    """Distance to the matched patches, differentiated through the
    whole-image normalization (mean and std both depend on every pixel)."""
    mean, std, clamped = image_stats(image)
    normalized = (image - mean) / std
    ps = db.patch_size
    energy = 0.0
    scatter = np.zeros_like(image)
    for (r, c), entry in zip(nn_field.positions, nn_field.indices):
        target = db.patches[int(entry)]
        diff = normalized[r : r + ps, c : c + ps] - target
        energy += float((diff ** 2).sum())
        scatter[r : r + ps, c : c + ps] += 2.0 * diff
    n = image.shape[0] * image.shape[1]
    g_mean = scatter.sum(axis=(0, 1)) / n
    grad = scatter - g_mean
    if not clamped:
        # chain through std: d(std)/d(pixel) = (pixel - mean) / (n * std)
        g_sigma = (scatter * normalized).sum(axis=(0, 1)) / n
        grad = grad - normalized * g_sigma
    return weight * energy, weight * grad / std


def regularizer(image, config: InversionConfig, db=None, nn_field=None):
    """Total smoothness + norm + patch energy and its gradient."""
    image = np.asarray(image, dtype=np.float64)
    energy = 0.0
    grad = np.zeros_like(image)
    if config.r_alpha > 0:
        e, g = _alpha_term(image, config.r_alpha)
        energy += e
        grad += g
    if config.r_beta > 0:
        e, g = _beta_term(image, config.r_beta)
        energy += e
        grad += g
    if config.r_gamma > 0:
        if db is None or nn_field is None:
            raise ValidationError("patch term needs a database and a matched field")
        e, g = _patch_term(image, config.r_gamma, db, nn_field)
        energy += e
        grad += g
    return energy, grad


def _patch_energy(image, config, db, nn_field):
    e, _ = _patch_term(image, config.r_gamma, db, nn_field)
    return e


# ---------------------------------------------------------------------------
# whitening


def whiten(image, stats: DatasetStats):
    """Per-channel dataset standardization."""
    return (np.asarray(image, dtype=np.float64) - stats.mean) / stats.std


def unwhiten(image, stats: DatasetStats):
    """Exact inverse of :func:`whiten`."""
    return np.asarray(image, dtype=np.float64) * stats.std + stats.mean


def relative_l2(original, estimate) -> float:
    """``||original - estimate|| / ||original||``."""
    original = np.asarray(original, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if original.shape != estimate.shape:
        raise ValidationError("shapes differ")
    denom = float(np.linalg.norm(original))
    if denom == 0.0:
        raise ValidationError("original image is zero")
    return float(np.linalg.norm(original - estimate)) / denom


# ---------------------------------------------------------------------------
# the optimizer


def _identity_stats(shape):
    return DatasetStats(
        mean=np.zeros(shape[2]),
        std=np.ones(shape[2]),
        mean_image=np.zeros(shape),
    )


def _initial_image(config, spec, stats, source, objective, init_db):
    """Starting point in whitened space."""
    db = init_db
    rng = np.random.default_rng(config.seed)
    shape = spec.input_shape
    if config.init_mode == "mean":
        return whiten(stats.mean_image, stats)
    if config.init_mode == "mean+noise":
        return whiten(stats.mean_image, stats) + config.noise_scale * rng.standard_normal(shape)
    if config.init_mode == "given-image":
        if source is None:
            raise ValidationError("init_mode 'given-image' needs a source image")
        return whiten(source, stats)
    if config.init_mode == "channel-shuffled":
        if source is None:
            raise ValidationError("init_mode 'channel-shuffled' needs a source image")
        perm = config.channel_perm
        if perm is None:
            perms = [p for p in _all_perms(shape[2]) if p != tuple(range(shape[2]))]
            perm = perms[rng.integers(len(perms))]
        return whiten(np.asarray(source, dtype=np.float64)[:, :, list(perm)], stats)
    # retrieval: average feature-matched patches; needs a feature objective
    if not isinstance(objective, FeatureObjective):
        raise ValidationError("init_mode 'retrieval' needs a feature objective")
    if db is None or db.features is None:
        raise ValidationError("init_mode 'retrieval' needs a feature-paired database")
    return retrieval_init(db, objective.target, spec, k=config.retrieval_k)


def _all_perms(n):
    import itertools

    return list(itertools.permutations(range(n)))


def invert(objective, weights, spec, config: InversionConfig,
           db: PatchDatabase | None = None, stats: DatasetStats | None = None,
           source=None, pixel_mask=None, frozen_image=None,
           init_db: PatchDatabase | None = None) -> InversionResult:
    """Gradient descent with momentum on the chosen objective.

    Feature objectives minimize ``data + R``; class objectives minimize
    ``-score + R``.  Every ``rematch_interval`` iterations the patch field is
    re-matched (when the patch term is active).  When the total energy goes
    up the momentum buffer is reset; if it goes up again on the very next
    step (so the raw step itself overshoots, not just the momentum) the step
    size is halved.

    ``pixel_mask`` freezes the complement of a boolean (H, W) region at
    ``frozen_image`` after every step (used for image completion).
    ``init_db`` supplies the feature-paired database for retrieval
    initialization when it differs from the patch-prior database.
    """
    if stats is None:
        stats = _identity_stats(spec.input_shape)
    if config.r_gamma > 0 and db is None:
        raise ValidationError("patch prior requested but no database given")
    if isinstance(objective, FeatureObjective):
        target = np.asarray(objective.target, dtype=np.float64)
        if float((target ** 2).sum()) == 0.0:
            raise ValidationError("target feature must be nonzero")
    elif not isinstance(objective, ClassObjective):
        raise ValidationError(f"unknown objective {objective!r}")

    x = _initial_image(config, spec, stats, source, objective,
                       db if init_db is None else init_db)
    mask3 = None
    if pixel_mask is not None:
        if frozen_image is None:
            raise ValidationError("pixel_mask needs a frozen_image")
        mask3 = np.asarray(pixel_mask, dtype=bool)[:, :, None]
        x_frozen = whiten(frozen_image, stats)
        x = np.where(mask3, x, x_frozen)

    nn_field = None
    stride = config.patch_stride
    velocity = np.zeros_like(x)
    step = config.step_size
    trace = np.zeros((config.iterations, 2))
    rematches = []
    prev_total = np.inf
    just_reset = False

    for it in range(config.iterations):
        if config.r_gamma > 0 and it % config.rematch_interval == 0:
            new_field = match(db, x, stride=stride)
            if nn_field is not None:
                before = _patch_energy(x, config, db, nn_field)
                after = _patch_energy(x, config, db, new_field)
                rematches.append((it, before, after))
            nn_field = new_field

        raw = unwhiten(x, stats)
        if isinstance(objective, FeatureObjective):
            data_e, data_g = data_energy_inversion(
                raw, weights, spec, objective.layer_index, objective.target
            )
            sign = 1.0
        else:
            data_e, data_g = data_score_class(
                raw, weights, spec, objective.class_index, objective.overrides
            )
            sign = -1.0
        reg_e, reg_g = regularizer(x, config, db, nn_field)
        total = sign * data_e + reg_e
        trace[it, 0] = data_e
        trace[it, 1] = reg_e

        if not np.isfinite(total) or abs(total) > config.divergence_limit:
            raise DivergenceError(f"energy {total!r} at iteration {it}")
        if total > prev_total:
            if just_reset:
                step *= 0.5
            velocity[:] = 0.0
            just_reset = True
        else:
            just_reset = False
        prev_total = total

        grad = sign * data_g * stats.std + reg_g  # chain data term through unwhiten
        velocity = config.momentum * velocity - step * grad
        x = x + velocity
        if mask3 is not None:
            x = np.where(mask3, x, x_frozen)

    out = unwhiten(x, stats)
    if mask3 is not None:
        out = np.where(mask3, out, np.asarray(frozen_image, dtype=np.float64))
    final_err = None
    if isinstance(objective, FeatureObjective):
        final_err = feature_error(out, weights, spec, objective.layer_index, objective.target)
    return InversionResult(
        image=out,
        energy_trace=trace,
        final_feature_error=final_err,
        nn_field=nn_field,
        rematch_trace=rematches,
    )
