"""Finite-difference oracle for the autodiff engine.

A graph is a tiny straight-line program over named values. The oracle side
re-implements every primitive in float64 with plain numpy, independent of the
engine, and differentiates by central differences. stop_gradient nodes are
handled by freezing their value from the unperturbed pass, which is exactly
the gradient semantics the engine promises.
"""

from __future__ import annotations

import numpy as np

from semauto import autodiff as ad

H = 1e-3


def _softmax64(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _eval_op64(op, args, kw):
    if op == "matmul":
        return args[0] @ args[1]
    if op == "add":
        return args[0] + args[1]
    if op == "multiply":
        return args[0] * args[1]
    if op == "scale":
        return args[0] * kw["c"]
    if op == "concat":
        return np.concatenate(args, axis=kw.get("axis", 0))
    if op == "slice":
        return args[0][kw["index"]]
    if op == "embedding_lookup":
        return args[0][kw["ids"]]
    if op == "softmax":
        return _softmax64(args[0])
    if op == "log_softmax":
        return np.log(_softmax64(args[0]))
    if op == "layer_norm":
        mu = args[0].mean(axis=-1, keepdims=True)
        var = args[0].var(axis=-1, keepdims=True)
        return (args[0] - mu) / np.sqrt(var + 1e-5)
    if op == "relu":
        return np.maximum(args[0], 0.0)
    if op == "reshape":
        return args[0].reshape(kw["shape"])
    if op == "transpose":
        return np.transpose(args[0], kw.get("axes"))
    if op == "reduce_sum":
        return np.asarray(args[0].sum(axis=kw.get("axis"), keepdims=kw.get("keepdims", False)))
    if op == "reduce_mean":
        return np.asarray(args[0].mean(axis=kw.get("axis"), keepdims=kw.get("keepdims", False)))
    if op == "masked_cross_entropy":
        logits, targets, mask = args[0], kw["targets"], np.asarray(kw["mask"], dtype=np.float64)
        logp = np.log(_softmax64(logits))
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        return np.asarray(-(picked * mask).sum() / mask.sum())
    raise ValueError(f"unknown op {op}")


def eval_f64(program, leaves, frozen_sg=None):
    """Evaluate the program in float64; returns (scalar, stop-gradient record).

    When frozen_sg is given, stop_gradient nodes take those recorded values
    instead of recomputing, so perturbations upstream of a stop_gradient do
    not reach the output. That mirrors reverse-mode semantics.
    """
    env = {k: np.asarray(v, dtype=np.float64) for k, v in leaves.items()}
    record = {}
    for i, (out, op, ins, kw) in enumerate(program):
        args = [env[name] for name in ins]
        if op == "stop_gradient":
            val = frozen_sg[i] if frozen_sg is not None else args[0].copy()
            record[i] = val
            env[out] = val
        else:
            env[out] = _eval_op64(op, args, kw)
    final = program[-1][0]
    return float(np.asarray(env[final]).reshape(())), record


_ENGINE_OPS = {
    "matmul": lambda args, kw: ad.matmul(*args),
    "add": lambda args, kw: ad.add(*args),
    "multiply": lambda args, kw: ad.multiply(*args),
    "scale": lambda args, kw: ad.scale(args[0], kw["c"]),
    "concat": lambda args, kw: ad.concat(args, axis=kw.get("axis", 0)),
    "slice": lambda args, kw: ad.slice_(args[0], kw["index"]),
    "embedding_lookup": lambda args, kw: ad.embedding_lookup(args[0], kw["ids"]),
    "softmax": lambda args, kw: ad.softmax(args[0]),
    "log_softmax": lambda args, kw: ad.log_softmax(args[0]),
    "layer_norm": lambda args, kw: ad.layer_norm(args[0]),
    "relu": lambda args, kw: ad.relu(args[0]),
    "reshape": lambda args, kw: ad.reshape(args[0], kw["shape"]),
    "transpose": lambda args, kw: ad.transpose(args[0], kw.get("axes")),
    "reduce_sum": lambda args, kw: ad.reduce_sum(args[0], axis=kw.get("axis"),
                                                 keepdims=kw.get("keepdims", False)),
    "reduce_mean": lambda args, kw: ad.reduce_mean(args[0], axis=kw.get("axis"),
                                                   keepdims=kw.get("keepdims", False)),
    "masked_cross_entropy": lambda args, kw: ad.masked_cross_entropy(
        args[0], kw["targets"], kw["mask"]),
    "stop_gradient": lambda args, kw: ad.stop_gradient(args[0]),
}


def eval_engine(program, leaves):
    """Run the program through the engine; returns (root tensor, leaf tensors)."""
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in leaves.items()}
    env = dict(tensors)
    with ad.Tape():
        for out, op, ins, kw in program:
            env[out] = _ENGINE_OPS[op]([env[n] for n in ins], kw)
        root = env[program[-1][0]]
        ad.backward(root)
    return root, tensors


def fd_gradients(program, leaves):
    """Central-difference gradients of the program output w.r.t. every leaf."""
    _, frozen = eval_f64(program, leaves)
    grads = {}
    for name, base in leaves.items():
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + H
            up, _ = eval_f64(program, leaves, frozen_sg=frozen)
            flat[j] = orig - H
            dn, _ = eval_f64(program, leaves, frozen_sg=frozen)
            flat[j] = orig
            gflat[j] = (up - dn) / (2 * H)
        grads[name] = g
    return grads


def max_rel_error(program, leaves):
    """Worst elementwise relative error of engine grads vs finite differences."""
    root, tensors = eval_engine(program, leaves)
    fd = fd_gradients(program, leaves)
    worst = 0.0
    for name, t in tensors.items():
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        want = fd[name]
        denom = np.maximum(np.abs(want), 1e-2)
        worst = max(worst, float(np.max(np.abs(got - want) / denom)))
    return worst


# ---------------------------------------------------------------------------
# random graph generation

ALL_PRIMITIVES = [
    "matmul", "add", "multiply", "scale", "concat", "slice", "embedding_lookup",
    "softmax", "log_softmax", "layer_norm", "relu", "reshape", "transpose",
    "reduce_sum", "reduce_mean", "masked_cross_entropy",
]


def _new_leaf(rng, shape, leaves, counter):
    name = f"leaf{counter[0]}"
    counter[0] += 1
    # keep magnitudes away from relu kinks and softmax saturation
    leaves[name] = (rng.uniform(0.25, 1.1, size=shape)
                    * rng.choice([-1.0, 1.0], size=shape)).astype(np.float64)
    return name


def _well_conditioned(program, leaves):
    """Validity precondition for the finite-difference oracle.

    Central differences only measure the true derivative where the function is
    locally smooth: relu inputs must sit clear of the kink and layer_norm rows
    must have non-negligible variance.
    """
    env = {k: np.asarray(v, dtype=np.float64) for k, v in leaves.items()}
    for _, op, ins, kw in program:
        args = [env[name] for name in ins]
        if op == "relu" and args[0].size and np.min(np.abs(args[0])) < 5 * H:
            return False
        if op == "layer_norm" and np.min(args[0].var(axis=-1)) < 0.02:
            return False
        env[_] = args[0].copy() if op == "stop_gradient" else _eval_op64(op, args, kw)
    return True


def random_program(seed: int, n_ops: int = 6):
    """Build a random program that applies one mandated primitive plus fillers.

    Resamples deterministically until the finite-difference validity
    precondition holds, so every returned graph is a fair oracle target.
    """
    for attempt in range(64):
        program, leaves = _random_program_once(np.random.default_rng((seed, attempt)), seed, n_ops)
        if _well_conditioned(program, leaves):
            return program, leaves
    raise RuntimeError(f"no well-conditioned graph found for seed {seed}")


def _random_program_once(rng, seed: int, n_ops: int):
    leaves: dict[str, np.ndarray] = {}
    counter = [0]
    program = []
    out_idx = [0]

    def emit(op, ins, kw, shape):
        name = f"n{out_idx[0]}"
        out_idx[0] += 1
        program.append((name, op, ins, kw))
        return name, shape

    def fresh(shape):
        return _new_leaf(rng, shape, leaves, counter)

    def apply_op(op, node, shape):
        """Apply op to (node, shape); returns (new node, new shape) or None."""
        if op == "matmul":
            if len(shape) < 2:
                return None
            k = int(rng.integers(2, 5))
            other = fresh((shape[-1], k))
            return emit(op, [node, other], {}, shape[:-1] + (k,))
        if op in ("add", "multiply"):
            other = fresh(shape)
            return emit(op, [node, other], {}, shape)
        if op == "scale":
            return emit(op, [node], {"c": float(rng.uniform(0.5, 2.0))}, shape)
        if op == "concat":
            other = fresh(shape)
            axis = int(rng.integers(0, len(shape))) if shape else None
            if axis is None:
                return None
            new = list(shape)
            new[axis] *= 2
            return emit(op, [node, other], {"axis": axis}, tuple(new))
        if op == "slice":
            if not shape or shape[0] < 2:
                return None
            index = (slice(0, shape[0] - 1),)
            return emit(op, [node], {"index": index}, (shape[0] - 1,) + shape[1:])
        if op == "embedding_lookup":
            if len(shape) != 2:
                return None
            ids = rng.integers(0, shape[0], size=(3,))
            return emit(op, [node], {"ids": ids}, (3, shape[1]))
        if op in ("softmax", "log_softmax", "layer_norm"):
            if not shape or shape[-1] < 2:
                return None
            return emit(op, [node], {}, shape)
        if op == "relu":
            return emit(op, [node], {}, shape)
        if op == "reshape":
            if not shape:
                return None
            flat = int(np.prod(shape))
            return emit(op, [node], {"shape": (flat,)}, (flat,))
        if op == "transpose":
            if len(shape) < 2:
                return None
            axes = tuple(rng.permutation(len(shape)).tolist())
            return emit(op, [node], {"axes": axes}, tuple(shape[a] for a in axes))
        if op == "reduce_sum" or op == "reduce_mean":
            if not shape:
                return None
            axis = int(rng.integers(0, len(shape)))
            return emit(op, [node], {"axis": axis},
                        shape[:axis] + shape[axis + 1:])
        if op == "masked_cross_entropy":
            if len(shape) != 2 or shape[-1] < 2:
                return None
            targets = rng.integers(0, shape[-1], size=shape[:-1])
            mask = np.ones(shape[:-1])
            return emit(op, [node], {"targets": targets, "mask": mask}, ())
        return None

    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    node = fresh(shape)
    # the mandated primitive goes first, while the 2-D start shape guarantees
    # it applies; fillers may be skipped when shapes stop conforming
    mandated = ALL_PRIMITIVES[seed % len(ALL_PRIMITIVES)]
    order = [mandated] + [str(rng.choice(ALL_PRIMITIVES)) for _ in range(n_ops - 1)]
    for op in order:
        result = apply_op(op, node, shape)
        if result is None:
            continue
        node, shape = result
        if shape == ():
            break
    if shape != ():
        node, shape = emit("reduce_mean", [node], {}, ())
    assert any(step[1] == mandated for step in program)
    return program, leaves
