"""Finite-difference gradient verification.

``finite_diff_grad`` is the reference: a central-difference estimate
computed in float64, one coordinate at a time, with no dependence on
the autodiff machinery.  ``run_check`` compares a backward-pass
gradient against it at randomly sampled points, resampling whenever
the forward graph passes too close to a nondifferentiable point
(relu/max/clip boundaries, interpolation cell edges).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, graph_nodes

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
DEFAULT_KINK_MARGIN = 1e-3
ERR_FLOOR = 1e-3


def finite_diff_grad(fn, x, eps=DEFAULT_EPS):
    """Central-difference gradient of scalar ``fn`` at ``x``.

    fn: ndarray -> float.  Returns an array of x's shape.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b, floor=ERR_FLOOR):
    """max_i |a_i - b_i| / max(floor, |a_i|, |b_i|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def graph_kink_margin(loss):
    """Smallest distance-to-kink over every gradient-carrying node."""
    margin = float("inf")
    for node in graph_nodes(loss):
        if node._kink is not None:
            margin = min(margin, node._kink())
    return margin


@dataclass
class GradCheck:
    """One named check: sample inputs, build a scalar, compare grads.

    sample: rng -> dict[name, float64 array]
    fn:     dict[name, Tensor] -> scalar Tensor
    wrt:    names to differentiate (defaults to every sampled array)
    """

    name: str
    sample: callable
    fn: callable
    wrt: tuple = ()
    points: int = 1


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float
    note: str = ""


def run_check(check, seed=0, eps=DEFAULT_EPS, tol=DEFAULT_TOL,
              kink_margin=DEFAULT_KINK_MARGIN, max_tries=50):
    rng = np.random.default_rng(np.random.SeedSequence([17, seed, abs(hash(check.name)) % (2 ** 32)]))
    worst = 0.0
    done = 0
    tries = 0
    while done < check.points:
        if tries >= max_tries:
            return CheckResult(check.name, False, worst,
                               f"could not sample a point clear of kinks in {max_tries} tries")
        tries += 1
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in check.sample(rng).items()}
        wrt = tuple(check.wrt) if check.wrt else tuple(arrays)
        tensors = {k: Tensor(v, requires_grad=(k in wrt)) for k, v in arrays.items()}
        loss = check.fn(tensors)
        if graph_kink_margin(loss) < kink_margin:
            continue
        loss.backward()
        for k in wrt:
            def value_at(a, _k=k):
                ts = {n: Tensor(arrays[n]) for n in arrays if n != _k}
                ts[_k] = Tensor(a)
                return float(check.fn(ts).data)

            numeric = finite_diff_grad(value_at, arrays[k], eps=eps)
            err = relative_error(tensors[k].grad, numeric)
            worst = max(worst, err)
            if err >= tol:
                return CheckResult(check.name, False, worst,
                                   f"gradient w.r.t. {k} off by {err:.3e}")
        done += 1
    return CheckResult(check.name, True, worst)


def run_suite(checks=None, seed=0, **kwargs):
    """Run checks (default: the full registry) and return their results."""
    if checks is None:
        checks = default_suite()
    return [run_check(c, seed=seed, **kwargs) for c in checks]


def format_results(results):
    lines = []
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  ({r.note})" if r.note else ""
        lines.append(f"{r.name:<{width}}  {status}  max rel err {r.max_rel_err:.3e}{extra}")
    return "\n".join(lines)


# -- default suite ----------------------------------------------------------


def _u(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def default_suite():
    """Checks covering every differentiable operation in the package."""
    from . import layers, losses, model
    from .tensor import affine_sample, concat, conv2d, matmul

    checks = []

    def add(name, sample, fn, wrt=(), points=1):
        checks.append(GradCheck(name, sample, fn, wrt, points))

    # tensor primitives
    add("tensor.add-broadcast",
        lambda rng: {"a": _u(rng, (3, 4)), "b": _u(rng, (1, 4)), "p": _u(rng, (3, 4))},
        lambda t: ((t["a"] + t["b"]) * t["p"]).sum(),
        wrt=("a", "b"))
    add("tensor.mul-div",
        lambda rng: {"a": _u(rng, (3, 4)), "b": _u(rng, (4,), 0.5, 2.0), "p": _u(rng, (3, 4))},
        lambda t: ((t["a"] * t["b"] / (t["b"] + 3.0)) * t["p"]).sum(),
        wrt=("a", "b"))
    add("tensor.matmul",
        lambda rng: {"a": _u(rng, (3, 4)), "b": _u(rng, (4, 2)), "p": _u(rng, (3, 2))},
        lambda t: (matmul(t["a"], t["b"]) * t["p"]).sum(),
        wrt=("a", "b"))
    add("tensor.matmul-transposed",
        lambda rng: {"a": _u(rng, (4, 3)), "b": _u(rng, (2, 4)), "p": _u(rng, (3, 2))},
        lambda t: (matmul(t["a"], t["b"], ta=True, tb=True) * t["p"]).sum(),
        wrt=("a", "b"))
    add("tensor.pow-exp-log",
        lambda rng: {"a": _u(rng, (3, 3), 0.5, 2.0), "e": _u(rng, (1,), 1.2, 3.0)},
        lambda t: ((t["a"] ** t["e"]).log().exp() * 0.5 + (t["a"] ** 2.0)).sum(),
        wrt=("a", "e"))
    add("tensor.sum-mean",
        lambda rng: {"a": _u(rng, (2, 3, 4))},
        lambda t: t["a"].sum(axes=(0, 2)).mean() + t["a"].mean(axes=1, keepdims=True).sum())
    add("tensor.max-reduce",
        lambda rng: {"a": _u(rng, (3, 5))},
        lambda t: t["a"].max(axes=1).sum() + t["a"].max() * 0.5)
    add("tensor.reshape-narrow-concat",
        lambda rng: {"a": _u(rng, (2, 6)), "b": _u(rng, (2, 3))},
        lambda t: (concat([t["a"].narrow(1, 1, 3), t["b"]], axis=1).reshape((12, 1)) ** 2.0).sum())
    add("tensor.relu-sigmoid-tanh",
        lambda rng: {"a": _u(rng, (4, 4))},
        lambda t: (t["a"].relu() + t["a"].sigmoid() * t["a"].tanh()).sum())
    add("tensor.clip",
        lambda rng: {"a": _u(rng, (4, 4), -3.0, 3.0)},
        lambda t: (t["a"].clip(-1.0, 1.0) ** 2.0).sum())
    add("tensor.softmax",
        lambda rng: {"a": _u(rng, (3, 5)), "p": _u(rng, (3, 5))},
        lambda t: (t["a"].softmax(axis=1) * t["p"]).sum(),
        wrt=("a",))
    add("tensor.logsumexp",
        lambda rng: {"a": _u(rng, (3, 5))},
        lambda t: t["a"].logsumexp(axis=1).sum())
    add("tensor.sqrt",
        lambda rng: {"a": _u(rng, (3, 3), 0.3, 2.0)},
        lambda t: t["a"].sqrt().sum())

    # nn blocks
    add("layers.conv2d",
        lambda rng: {"x": _u(rng, (2, 2, 5, 4)), "w": _u(rng, (3, 2, 3, 3)), "p": _u(rng, (2, 3, 3, 2))},
        lambda t: (conv2d(t["x"], t["w"], stride=2, padding=1) * t["p"]).sum(),
        wrt=("x", "w"))
    add("layers.conv-block",
        lambda rng: {"x": _u(rng, (2, 2, 4, 4)), "w": _u(rng, (3, 2, 3, 3)), "b": _u(rng, (3,))},
        lambda t: layers.ConvBlock.from_params(t["w"], t["b"], stride=1, padding=1)(t["x"]).sum(),
        wrt=("x", "w", "b"))
    add("layers.dense",
        lambda rng: {"x": _u(rng, (3, 4)), "w": _u(rng, (2, 4)), "b": _u(rng, (2,))},
        lambda t: (layers.Dense.from_params(t["w"], t["b"], activation="relu")(t["x"])).sum())
    add("layers.gap",
        lambda rng: {"x": _u(rng, (2, 3, 4, 4)), "p": _u(rng, (2, 3))},
        lambda t: (layers.gap(t["x"]) * t["p"]).sum(),
        wrt=("x",))
    add("layers.gmp",
        lambda rng: {"x": _u(rng, (2, 3, 4, 4)), "p": _u(rng, (2, 3))},
        lambda t: (layers.gmp(t["x"]) * t["p"]).sum(),
        wrt=("x",))
    add("layers.gem-x",
        lambda rng: {"x": _u(rng, (2, 3, 4, 4), 0.05, 2.0), "p": _u(rng, (1,), 1.5, 4.0)},
        lambda t: layers.gem_pool(t["x"], t["p"]).sum(),
        wrt=("x",))
    add("layers.gem-p",
        lambda rng: {"x": _u(rng, (2, 3, 4, 4), 0.05, 2.0), "p": _u(rng, (1,), 1.5, 4.0)},
        lambda t: layers.gem_pool(t["x"], t["p"]).sum(),
        wrt=("p",))
    add("layers.sampler-image",
        lambda rng: {"x": _u(rng, (2, 2, 6, 5)),
                     "prm": np.stack([rng.uniform(0.4, 0.8, 2), rng.uniform(0.4, 0.8, 2),
                                      rng.uniform(-0.3, 0.3, 2), rng.uniform(-0.3, 0.3, 2)], axis=1),
                     "p": _u(rng, (2, 2, 4, 4))},
        lambda t: (affine_sample(t["x"], t["prm"], 4, 4) * t["p"]).sum(),
        wrt=("x",))
    add("layers.sampler-params",
        lambda rng: {"x": _u(rng, (2, 2, 6, 5)),
                     "prm": np.stack([rng.uniform(0.4, 0.8, 2), rng.uniform(0.4, 0.8, 2),
                                      rng.uniform(-0.3, 0.3, 2), rng.uniform(-0.3, 0.3, 2)], axis=1),
                     "p": _u(rng, (2, 2, 4, 4))},
        lambda t: (affine_sample(t["x"], t["prm"], 4, 4) * t["p"]).sum(),
        wrt=("prm",))

    # model blocks
    add("model.channel-attention",
        lambda rng: {"x": _u(rng, (2, 4, 3, 3), 0.05, 1.5), "w1": _u(rng, (2, 4)), "b1": _u(rng, (2,)),
                     "w2": _u(rng, (4, 2)), "b2": _u(rng, (4,)), "p": _u(rng, (1,), 1.5, 3.0),
                     "pr": _u(rng, (2, 4, 3, 3))},
        lambda t: (model.channel_attention(
            t["x"],
            layers.Dense.from_params(t["w1"], t["b1"], activation="relu"),
            layers.Dense.from_params(t["w2"], t["b2"], activation="sigmoid"),
            layers.GeM.from_p(t["p"])) * t["pr"]).sum(),
        wrt=("x", "w1", "w2", "p"))
    add("model.spatial-attention",
        lambda rng: {"x": _u(rng, (2, 3, 4, 4)), "pr": _u(rng, (2, 3, 4, 4))},
        lambda t: (model.spatial_attention(t["x"]) * t["pr"]).sum(),
        wrt=("x",))
    add("model.adaptive-fusion",
        lambda rng: {"fg": _u(rng, (3, 4)), "fh": _u(rng, (3, 4)),
                     "wb": _u(rng, (2, 4)), "bb": _u(rng, (2,)),
                     "ww": _u(rng, (2, 2)), "bw": _u(rng, (2,)), "pr": _u(rng, (3, 8))},
        lambda t: (model.adaptive_fuse(
            t["fg"], t["fh"],
            layers.Dense.from_params(t["wb"], t["bb"]),
            layers.Dense.from_params(t["ww"], t["bw"])).f * t["pr"]).sum(),
        wrt=("fg", "fh", "wb", "ww"))
    add("model.hll-head",
        lambda rng: {"x": _u(rng, (2, 1, 8, 6), 0.0, 1.0),
                     "w1": _u(rng, (2, 1, 3, 3), -0.5, 0.5), "b1": _u(rng, (2,), -0.1, 0.1),
                     "wf": _u(rng, (4, 2), -0.5, 0.5), "bf": _u(rng, (4,), -0.5, 0.5),
                     "pr": _u(rng, (2, 4))},
        lambda t: (model.squash_params(layers.Dense.from_params(t["wf"], t["bf"])(
            layers.gap(layers.ConvBlock.from_params(t["w1"], t["b1"], stride=2, padding=1)(t["x"])))) * t["pr"]).sum(),
        wrt=("w1", "wf", "bf"))
    add("model.params-to-box",
        lambda rng: {"prm": np.stack([rng.uniform(0.3, 0.7, 3), rng.uniform(0.3, 0.7, 3),
                                      rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.2, 0.2, 3)], axis=1),
                     "pr": _u(rng, (3, 4))},
        lambda t: (model.params_to_box(t["prm"]) * t["pr"]).sum(),
        wrt=("prm",))

    # losses
    add("losses.cross-entropy",
        lambda rng: {"z": _u(rng, (5, 4))},
        lambda t: losses.cross_entropy(t["z"], np.array([0, 3, 1, 2, 2])))
    add("losses.batch-hard-triplet",
        lambda rng: {"e": _u(rng, (8, 5))},
        lambda t: losses.batch_hard_triplet(t["e"], np.array([0, 0, 1, 1, 2, 2, 3, 3]), margin=0.3))
    add("losses.box-l2",
        lambda rng: {"prm": np.stack([rng.uniform(0.3, 0.7, 4), rng.uniform(0.3, 0.7, 4),
                                      rng.uniform(-0.2, 0.2, 4), rng.uniform(-0.2, 0.2, 4)], axis=1)},
        lambda t: losses.box_l2(t["prm"], np.tile([0.2, 0.1, 0.8, 0.5], (4, 1))),
        wrt=("prm",))

    return checks
