"""Tape-based reverse-mode differentiation over the layer kernels.

A Tape is a static graph: build it once, then run forward/backward many
times. Parameters live in a ParameterStore shared between tapes (encoder,
decoder, and the end-to-end training tape all reference the same store).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from csilab import layers
from csilab.tensor import ShapeError


class GraphError(RuntimeError):
    """Misuse of the tape: unbound inputs, backward before forward, etc."""


@dataclass
class Parameter:
    value: np.ndarray
    trainable: bool = True


class ParameterStore:
    """Ordered registry of named tensors backing one model."""

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._params:
            raise GraphError(f"parameter {name!r} already registered")
        p = Parameter(np.ascontiguousarray(value, dtype=self.dtype), trainable)
        self._params[name] = p
        return p.value

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._params[name].value
        except KeyError:
            raise GraphError(f"unknown parameter {name!r}") from None

    def __setitem__(self, name: str, value: np.ndarray):
        p = self._params[name]
        if value.shape != p.value.shape:
            raise ShapeError(f"parameter {name!r} shape {p.value.shape} != {value.shape}")
        p.value = np.ascontiguousarray(value, dtype=self.dtype)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [k for k, p in self._params.items() if p.trainable]

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            self[k] = v


@dataclass
class Node:
    idx: int
    op: str
    inputs: tuple[int, ...]
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


class Tape:
    def __init__(self, store: ParameterStore):
        self.store = store
        self.nodes: list[Node] = []
        self.input_ids: dict[str, int] = {}
        self._values: list[Optional[np.ndarray]] = []
        self._ctx: list = []
        self._ran = False

    # -- construction -------------------------------------------------------

    def add(self, op: str, inputs: tuple[int, ...] = (), params: tuple[str, ...] = (), **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"input node {i} does not precede node {len(self.nodes)}")
        node = Node(len(self.nodes), op, tuple(inputs), tuple(params), attrs)
        self.nodes.append(node)
        self._values.append(None)
        self._ctx.append(None)
        return node.idx

    def input(self, name: str) -> int:
        if name in self.input_ids:
            raise GraphError(f"duplicate input {name!r}")
        idx = self.add("input", name=name)
        self.input_ids[name] = idx
        return idx

    @property
    def output_id(self) -> int:
        return len(self.nodes) - 1

    # -- execution ----------------------------------------------------------

    def forward(self, bindings: dict[str, np.ndarray], mode: str = "infer", upto: Optional[int] = None) -> np.ndarray:
        missing = set(self.input_ids) - set(bindings)
        if missing:
            raise GraphError(f"unbound inputs: {sorted(missing)}")
        last = self.output_id if upto is None else upto
        for node in self.nodes[: last + 1]:
            ins = [self._values[i] for i in node.inputs]
            self._values[node.idx] = _forward_node(self, node, ins, bindings, mode)
        self._ran = True
        self._mode = mode
        return self._values[last]

    def value(self, idx: int) -> np.ndarray:
        if self._values[idx] is None:
            raise GraphError("node has no cached value; run forward first")
        return self._values[idx]

    def backward(self, seed: Optional[np.ndarray] = None) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Return (parameter gradients, input gradients) for the last forward."""
        if not self._ran:
            raise GraphError("backward before forward")
        out_id = self.output_id
        out_val = self._values[out_id]
        if seed is None:
            if out_val.size != 1:
                raise GraphError(f"loss node must be scalar, has shape {out_val.shape}")
            seed = np.ones_like(out_val)
        grads: dict[int, np.ndarray] = {out_id: np.asarray(seed, dtype=out_val.dtype)}
        param_grads: dict[str, np.ndarray] = {}
        input_grads: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            gy = grads.pop(node.idx, None)
            if gy is None:
                continue
            if node.op == "input":
                name = node.attrs["name"]
                input_grads[name] = input_grads.get(name, 0) + gy
                continue
            in_grads, p_grads = _backward_node(self, node, gy)
            for i, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + g
                else:
                    grads[i] = g
            for name, g in p_grads.items():
                if name in param_grads:
                    param_grads[name] = param_grads[name] + g
                else:
                    param_grads[name] = g
        return param_grads, input_grads


# ---------------------------------------------------------------------------
# op dispatch


def _forward_node(tape: Tape, node: Node, ins, bindings, mode):
    s = tape.store
    op = node.op
    if op == "input":
        x = np.ascontiguousarray(bindings[node.attrs["name"]], dtype=s.dtype)
        if x.ndim != 4:
            raise ShapeError(f"input {node.attrs['name']!r} must be 4-D, got {x.ndim}-D")
        return x
    if op == "conv2d":
        w = s[node.params[0]]
        b = s[node.params[1]] if len(node.params) > 1 else None
        y, ctx = layers.conv2d_forward(ins[0], w, b, node.attrs["stride"])
    elif op == "dwconv2d":
        y, ctx = layers.depthwise_conv2d_forward(ins[0], s[node.params[0]], node.attrs["stride"])
    elif op == "avg_pool2":
        y, ctx = layers.avg_pool2_forward(ins[0])
    elif op == "upsample2":
        y, ctx = layers.bilinear_upsample2_forward(ins[0])
    elif op == "batch_norm":
        gname, bname, rmname, rvname = node.params
        y, ctx, new_rm, new_rv = layers.batch_norm_forward(
            ins[0], s[gname], s[bname], s[rmname], s[rvname],
            node.attrs["momentum"], node.attrs["eps"], mode,
        )
        if mode == "train":
            s[rmname] = new_rm.astype(s.dtype)
            s[rvname] = new_rv.astype(s.dtype)
    elif op == "leaky_relu":
        y, ctx = layers.leaky_relu_forward(ins[0], node.attrs["alpha"])
    elif op == "sigmoid":
        y, ctx = layers.sigmoid_forward(ins[0])
    elif op == "dense":
        w = s[node.params[0]]
        b = s[node.params[1]] if len(node.params) > 1 else None
        y, ctx = layers.dense_forward(ins[0], w, b)
    elif op == "concat":
        y, ctx = layers.concat_channels_forward(ins[0], ins[1])
    elif op == "slice_channels":
        lo, hi = node.attrs["lo"], node.attrs["hi"]
        y, ctx = np.ascontiguousarray(ins[0][:, lo:hi]), (ins[0].shape[1], lo, hi)
    elif op == "shuffle":
        y, ctx = layers.channel_shuffle_forward(ins[0], node.attrs["groups"])
    elif op == "add":
        if ins[0].shape != ins[1].shape:
            raise ShapeError(f"add shape mismatch: {ins[0].shape} vs {ins[1].shape}")
        y, ctx = ins[0] + ins[1], None
    elif op == "mse_loss":
        pred, target = ins
        if pred.shape != target.shape:
            raise ShapeError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
        diff = pred - target
        n = pred.shape[0]
        y = np.asarray(np.sum(diff * diff) / n, dtype=pred.dtype).reshape(1, 1, 1, 1)
        ctx = (diff, n)
    else:
        raise GraphError(f"unknown op {op!r}")
    tape._ctx[node.idx] = ctx
    return y


def _backward_node(tape: Tape, node: Node, gy):
    ctx = tape._ctx[node.idx]
    op = node.op
    p_grads: dict[str, np.ndarray] = {}
    if op == "conv2d":
        gx, gw, gb = layers.conv2d_backward(ctx, gy)
        p_grads[node.params[0]] = gw
        if gb is not None:
            p_grads[node.params[1]] = gb
        return [gx], p_grads
    if op == "dwconv2d":
        gx, gw = layers.depthwise_conv2d_backward(ctx, gy)
        p_grads[node.params[0]] = gw
        return [gx], p_grads
    if op == "avg_pool2":
        return [layers.avg_pool2_backward(ctx, gy)], p_grads
    if op == "upsample2":
        return [layers.bilinear_upsample2_backward(ctx, gy)], p_grads
    if op == "batch_norm":
        gx, ggamma, gbeta = layers.batch_norm_backward(ctx, gy)
        p_grads[node.params[0]] = ggamma
        p_grads[node.params[1]] = gbeta
        return [gx], p_grads
    if op == "leaky_relu":
        return [layers.leaky_relu_backward(ctx, gy)], p_grads
    if op == "sigmoid":
        return [layers.sigmoid_backward(ctx, gy)], p_grads
    if op == "dense":
        gx, gw, gb = layers.dense_backward(ctx, gy)
        p_grads[node.params[0]] = gw
        if gb is not None:
            p_grads[node.params[1]] = gb
        return [gx], p_grads
    if op == "concat":
        ga, gb_ = layers.concat_channels_backward(ctx, gy)
        return [ga, gb_], p_grads
    if op == "slice_channels":
        c, lo, hi = ctx
        gx = np.zeros((gy.shape[0], c) + gy.shape[2:], dtype=gy.dtype)
        gx[:, lo:hi] = gy
        return [gx], p_grads
    if op == "shuffle":
        return [layers.channel_shuffle_backward(ctx, gy)], p_grads
    if op == "add":
        return [gy, gy], p_grads
    if op == "mse_loss":
        diff, n = ctx
        g = (2.0 / n) * diff * gy.reshape(())
        return [g, -g], p_grads
    raise GraphError(f"no backward rule for op {op!r}")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    tape: Tape,
    bindings: dict[str, np.ndarray],
    param_name: str,
    probe_count: int = 32,
    eps: float = 1e-5,
    mode: str = "train",
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The tape's terminal node must be a scalar loss. Requires a float64 store;
    float32 roundoff drowns the finite differences.

    Probes whose +/-eps evaluations land on different sides of a LeakyReLU
    kink are skipped: the loss is not differentiable across the kink, so the
    central difference measures a chord slope there, not the gradient.
    """
    if tape.store.dtype != np.float64:
        raise GraphError("grad_check requires a float64 parameter store")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    theta = tape.store[param_name]  # raises on unknown name
    rng = rng or np.random.default_rng(0)

    loss0 = float(tape.forward(bindings, mode=mode).reshape(()))
    analytic, _ = tape.backward()
    ga = analytic.get(param_name)
    if ga is None:
        ga = np.zeros_like(theta)

    # smallest gradient magnitude the central difference can certify at the
    # 1e-5 relative level: the loss carries ~|L|*machine-eps roundoff, which
    # the difference quotient amplifies by 1/eps; probes below this floor
    # measure that noise, not implementation error.  The 10x margin keeps
    # probes just above the floor from sitting exactly at the tolerance
    # boundary, where accumulated forward-pass roundoff can tip them over.
    noise = abs(loss0) * float(np.finfo(np.float64).eps) / eps
    floor = max(1e-6, 10.0 * noise / 1e-5)

    kink_nodes = [n.idx for n in tape.nodes if n.op == "leaky_relu"]
    flat = theta.reshape(-1)
    count = min(probe_count, flat.size)
    idxs = rng.choice(flat.size, size=count, replace=False)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        lp = float(tape.forward(bindings, mode=mode).reshape(()))
        slopes_plus = [tape._ctx[j] for j in kink_nodes]
        flat[i] = orig - eps
        lm = float(tape.forward(bindings, mode=mode).reshape(()))
        flat[i] = orig
        if any(
            not np.array_equal(tape._ctx[j], sp) for j, sp in zip(kink_nodes, slopes_plus)
        ):
            continue  # the probe straddles an activation kink
        numeric = (lp - lm) / (2.0 * eps)
        a = float(ga.reshape(-1)[i])
        if abs(a) < floor and abs(numeric) < floor:
            # below the finite-difference noise floor; a parameter with no
            # loss influence also lands here on both sides
            continue
        denom = max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, abs(a - numeric) / denom)
    # restore caches to the unperturbed point
    tape.forward(bindings, mode=mode)
    return worst
