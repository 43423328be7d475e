"""Central-finite-difference verification of analytic gradients.

Each ``check_*`` function builds a random instance of one network
operation in double precision, differentiates a scalar readout both
analytically (via the autodiff graph) and numerically, and returns the
worst relative error over all checked arrays.  ``run_all`` aggregates
them over many instances; the CLI ``gradcheck`` command prints the table.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from . import model as model_mod

DEFAULT_STEP = 1e-4


def numeric_gradient(f, x, step=DEFAULT_STEP):
    """Central finite differences of scalar-valued ``f`` at array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic, numeric):
    """max |a - n| / max(|a| + |n|, 1e-6), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), 1e-6)
    return float(np.max(np.abs(a - n) / denom))


def _check_op(build, arrays, step=DEFAULT_STEP):
    """Compare graph gradients of ``build(*tensors)`` against FD.

    ``build`` maps Tensors to a scalar Tensor; ``arrays`` are the float64
    leaf values.  Returns the worst relative error over all leaves.
    """
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            probe = [ad.Tensor(a.copy()) for a in arrays]
            probe[i] = ad.Tensor(x)
            return build(*probe).item()

        num = numeric_gradient(f, arrays[i], step)
        worst = max(worst, relative_error(leaf.grad, num))
    return worst


def check_attribute_mask(rng, step=DEFAULT_STEP):
    """Gradient of a mask readout w.r.t. feature map and mask conv params."""
    n, c, s = 2, 5, 3
    f_r = rng.standard_normal((n, c, s, s))
    weight = rng.standard_normal((c, c)) * 0.5
    bias = rng.standard_normal(c) * 0.1
    readout = rng.standard_normal((n, c))

    def build(f, w, b):
        mask = model_mod.attribute_mask(f, model_mod.MaskParams(w, b))
        return ad.tsum(mask * readout)

    return _check_op(build, [f_r, weight, bias], step)


def check_apply_mask(rng, step=DEFAULT_STEP):
    n, c, s = 2, 4, 3
    f = rng.standard_normal((n, c, s, s))
    mask = rng.uniform(0.05, 1.0, (n, c))
    readout = rng.standard_normal((n, c, s, s))

    def build(ft, mt):
        return ad.tsum(model_mod.apply_mask(ft, mt) * readout)

    return _check_op(build, [f, mask], step)


def check_guided_category_features(rng, step=DEFAULT_STEP):
    n, c, m, s = 2, 4, 4, 3
    f_c = rng.standard_normal((n, c, s, s))
    mask = rng.uniform(0.05, 1.0, (n, m))
    weight = rng.standard_normal((c, m)) * 0.5
    bias = rng.standard_normal(c) * 0.1
    readout = rng.standard_normal((n, c, s, s))

    def build(f, mk, w, b):
        fused = model_mod.guided_category_features(
            f, mk, model_mod.GuideParams(w, b))
        return ad.tsum(fused * readout)

    return _check_op(build, [f_c, mask, weight, bias], step)


def check_verification_head(rng, step=DEFAULT_STEP):
    n, d = 3, 6
    f1 = rng.standard_normal((n, d))
    f2 = rng.standard_normal((n, d))
    weight = rng.standard_normal((2, d)) * 0.5
    bias = rng.standard_normal(2) * 0.1
    readout = rng.standard_normal((n, 2))

    def build(a, b, w, c):
        logits = model_mod.verification_head(
            a, b, model_mod.VerifyParams(w, c))
        return ad.tsum(logits * readout)

    return _check_op(build, [f1, f2, weight, bias], step)


def check_als_loss(rng, step=DEFAULT_STEP, num_classes=10):
    """Gradient of the smoothing loss through softmax w.r.t. logits."""
    n = 4
    logits = rng.standard_normal((n, num_classes))
    targets = rng.integers(0, num_classes, n)
    eps = rng.choice([0.0, 0.1, 0.9], n)

    def build(z):
        return losses.als_loss_from_logits(z, targets, eps,
                                           alpha=0.1, beta=1.0)

    return _check_op(build, [logits], step)


def check_forward_branch(rng, step=DEFAULT_STEP):
    """Spot check through the full branch, image pixels only.

    The branch contains relu kinks, so unlike the kink-free op checks this
    one perturbs a small random subset of pixels and relies on activations
    staying away from zero at the probe points.
    """
    config = model_mod.ModelConfig(
        backbone_channels=(4, 6), spatial_size=2, num_identities=5,
        num_colors=3, num_types=2, embedding_dim=8,
        seed=int(rng.integers(0, 2**31)))
    model = model_mod.build_model(config)
    params = model.param_tensors(requires_grad=False)
    image = rng.uniform(0.1, 0.9, (1, 3, config.input_side, config.input_side))
    r_id = rng.standard_normal(config.num_identities)
    r_color = rng.standard_normal(config.num_colors)

    def readout(tensor):
        out = model_mod.branch_graph(params, tensor, config)
        return ad.tsum(out["id_logits"] * r_id) + ad.tsum(
            out["color_logits"] * r_color)

    leaf = ad.Tensor(image.copy(), requires_grad=True)
    readout(leaf).backward()

    flat_idx = rng.choice(image.size, size=24, replace=False)
    probe = image.copy().reshape(-1)
    worst = 0.0
    for i in flat_idx:
        orig = probe[i]
        probe[i] = orig + step
        hi = readout(ad.Tensor(probe.reshape(image.shape))).item()
        probe[i] = orig - step
        lo = readout(ad.Tensor(probe.reshape(image.shape))).item()
        probe[i] = orig
        num = (hi - lo) / (2 * step)
        worst = max(worst, relative_error(leaf.grad.reshape(-1)[i], num))
    return worst


CHECKS = {
    "attribute_mask": check_attribute_mask,
    "apply_mask": check_apply_mask,
    "guided_category_features": check_guided_category_features,
    "verification_head": check_verification_head,
    "als_loss": check_als_loss,
    "forward_branch": check_forward_branch,
}


def run_all(seed=0, instances=20, step=DEFAULT_STEP, ops=None):
    """Run every registered check ``instances`` times; return op -> max error.

    ``forward_branch`` is a spot check and runs a fixed small number of
    times regardless of ``instances``.
    """
    results = {}
    for op_index, (name, fn) in enumerate(CHECKS.items()):
        if ops is not None and name not in ops:
            continue
        count = 3 if name == "forward_branch" else instances
        rng = np.random.default_rng(np.random.SeedSequence((seed, op_index)))
        worst = 0.0
        for _ in range(count):
            worst = max(worst, fn(rng, step))
        results[name] = worst
    return results
