"""Architecture shorthand: parsing, rendering, shape inference and assembly.

Grammar (whitespace ignored, case-sensitive)::

    spec  := layer ('-' layer)*
    layer := 'C(' n ',' f ',' s ')' | 'DC(' n ',' f ',' s ')'
           | 'FC(' n ')' | 'N' | 'V(' rational ')'

``C`` is a convolution with ``n`` filters of spatial size ``f`` and stride
``s``, ``DC`` the transposed convolution mirroring a ``C`` with the same
numbers, ``FC`` a fully connected layer, ``N`` local response normalization
and ``V`` a spline-initialized velocity layer with sampling factor in (0, 1].
Temporal kernel sizes and strides are not part of the shorthand; they come
from a separate temporal plan such as ``(3,2),(2,2),(2,1)``.
"""

import dataclasses
import math
import re
from fractions import Fraction

import numpy as np

from . import layers as L
from .spline import parse_number_list, parse_rational, velocity_weights


class ArchParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ShapeError(ValueError):
    def __init__(self, message, index=None):
        prefix = f"layer {index}: " if index is not None else ""
        super().__init__(prefix + message)
        self.index = index


@dataclasses.dataclass(frozen=True)
class Conv:
    n: int
    f: int
    s: int


@dataclasses.dataclass(frozen=True)
class Deconv:
    n: int
    f: int
    s: int


@dataclasses.dataclass(frozen=True)
class FullyConnected:
    n: int


@dataclasses.dataclass(frozen=True)
class Norm:
    pass


@dataclasses.dataclass(frozen=True)
class VelocitySpec:
    factor: Fraction

    def __post_init__(self):
        if not 0 < self.factor <= 1:
            raise ValueError(f"velocity factor must lie in (0, 1], got {self.factor}")


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_dims: tuple = None
    temporal_plan: tuple = ()


# parsing -----------------------------------------------------------------

_ARITY = {"C": 3, "DC": 3, "FC": 1, "V": 1}


class _Scanner:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            found = repr(self.peek()) if self.peek() else "end of input"
            raise ArchParseError(f"expected {ch!r}, found {found}", self.pos)
        self.pos += 1

    def word(self):
        self.skip()
        m = re.compile(r"DC|FC|C|N|V").match(self.text, self.pos)
        if not m:
            raise ArchParseError("unknown token", self.pos)
        self.pos = m.end()
        return m.group(0), m.start()

    def argument(self):
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in ",)":
            self.pos += 1
        raw = "".join(self.text[start:self.pos].split())
        return raw, start


def _positive_int(raw, offset):
    if not re.fullmatch(r"\d+", raw):
        raise ArchParseError(f"expected a positive integer, got {raw!r}", offset)
    value = int(raw)
    if value <= 0:
        raise ArchParseError(f"expected a positive integer, got {raw!r}", offset)
    return value


def _layer(sc):
    name, start = sc.word()
    if name == "N":
        return Norm()
    sc.skip()
    open_at = sc.pos
    sc.expect("(")
    args = [sc.argument()]
    while sc.peek() == ",":
        sc.pos += 1
        args.append(sc.argument())
    if sc.peek() != ")":
        raise ArchParseError("unterminated argument list", sc.pos)
    sc.pos += 1
    if len(args) != _ARITY[name]:
        raise ArchParseError(
            f"{name} takes {_ARITY[name]} argument(s), got {len(args)}", open_at)
    if name == "V":
        raw, off = args[0]
        try:
            factor = parse_rational(raw)
        except ValueError:
            raise ArchParseError(f"bad velocity factor {raw!r}", off) from None
        if not 0 < factor <= 1:
            raise ArchParseError(f"velocity factor {raw!r} outside (0, 1]", off)
        return VelocitySpec(factor)
    values = [_positive_int(raw, off) for raw, off in args]
    return {"C": Conv, "DC": Deconv, "FC": FullyConnected}[name](*values)


def parse_shorthand(text, input_dims=None, temporal_plan=()):
    sc = _Scanner(text)
    if not sc.peek():
        raise ArchParseError("empty architecture", sc.pos)
    layers = [_layer(sc)]
    while sc.peek() == "-":
        sc.pos += 1
        layers.append(_layer(sc))
    if sc.peek():
        raise ArchParseError("trailing garbage", sc.pos)
    if isinstance(temporal_plan, str):
        temporal_plan = parse_temporal_plan(temporal_plan)
    return NetworkSpec(tuple(layers),
                       tuple(input_dims) if input_dims is not None else None,
                       tuple(tuple(p) for p in temporal_plan))


def render_layer(layer):
    if isinstance(layer, Conv):
        return f"C({layer.n},{layer.f},{layer.s})"
    if isinstance(layer, Deconv):
        return f"DC({layer.n},{layer.f},{layer.s})"
    if isinstance(layer, FullyConnected):
        return f"FC({layer.n})"
    if isinstance(layer, Norm):
        return "N"
    if isinstance(layer, VelocitySpec):
        return f"V({layer.factor})"
    raise TypeError(f"not a layer spec: {layer!r}")


def render_shorthand(spec):
    layers = spec.layers if isinstance(spec, NetworkSpec) else spec
    return "-".join(render_layer(layer) for layer in layers)


def parse_temporal_plan(text):
    """``"(3,2),(2,2),(2,1)"`` -> ``((3, 2), (2, 2), (2, 1))``."""
    text = "".join(text.split())
    if not text:
        return ()
    if not re.fullmatch(r"\(\d+,\d+\)(,\(\d+,\d+\))*", text):
        raise ValueError(f"bad temporal plan {text!r}")
    plan = tuple((int(a), int(b)) for a, b in re.findall(r"\((\d+),(\d+)\)", text))
    if any(a <= 0 or b <= 0 for a, b in plan):
        raise ValueError("temporal plan entries must be positive")
    return plan


def render_temporal_plan(plan):
    return ",".join(f"({a},{b})" for a, b in plan)


def parse_dims(text):
    """``"9x1x33x33"`` -> ``(9, 1, 33, 33)``."""
    parts = str(text).lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"bad dims {text!r}") from None
    if any(d <= 0 for d in dims):
        raise ValueError(f"dims must be positive: {text!r}")
    return dims


def parse_factors(text):
    return [parse_rational(f) for f in text] if not isinstance(text, str) \
        else parse_number_list(text)


# networks ----------------------------------------------------------------

class Network:
    """A chain of layers run in order.

    For autoencoders, ``tap`` is the index of the layer whose output is the
    deep feature vector and ``depth[i]`` tells which encoder/decoder pair layer
    ``i`` belongs to (``K`` for the fully connected core, ``-1`` for leading
    velocity layers), which is what layer-wise pretraining slices on.
    """

    def __init__(self, layers, shapes, input_dims, tap=None, depth=None, n_pairs=0):
        self.layers = layers
        self.shapes = shapes
        self.input_dims = tuple(input_dims)
        self.tap = tap
        self.depth = depth if depth is not None else [0] * len(layers)
        self.n_pairs = n_pairs
        self.features = None
        self._active = None

    @property
    def is_autoencoder(self):
        return any(isinstance(layer, L.Deconv3D) for layer in self.layers)

    @property
    def feature_width(self):
        if self.tap is None:
            return math.prod(self.shapes[-1])
        return math.prod(self.shapes[self.tap])

    @property
    def param_count(self):
        return sum(layer.param_count for layer in self.layers)

    def named_layers(self, prefix=""):
        return [(prefix + layer.name, layer) for layer in self.layers]

    def active_layers(self, depth=None):
        """Indices of the shallow autoencoder keeping the outer ``depth`` pairs."""
        if depth is None or depth > self.n_pairs:
            return list(range(len(self.layers)))
        return [i for i, d in enumerate(self.depth) if d < depth]

    def init_params(self, rng, init_std=0.01):
        for layer in self.layers:
            layer.init_params(rng, init_std)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x, depth=None):
        active = self.active_layers(depth)
        self._active = active
        self.features = None
        for i in active:
            x = self.layers[i].forward(x)
            if i == self.tap:
                self.features = x.reshape(x.shape[0], -1)
        if self.features is None:
            self.features = x.reshape(x.shape[0], -1)
        return x

    def backward(self, grad, feature_grad=None, depth=None):
        """Backpropagate ``grad`` from the output; ``feature_grad`` joins at the tap."""
        if self._active is None:
            raise RuntimeError("backward called before forward")
        active = self._active
        if grad is None:
            # only the feature path contributes: start at the tap
            if self.tap is None or self.tap not in active:
                raise ValueError("no output gradient and no tap in the active layers")
            active = active[:active.index(self.tap) + 1]
            grad = np.zeros((feature_grad.shape[0],) + self.shapes[self.tap])
        for i in reversed(active):
            if i == self.tap and feature_grad is not None:
                grad = grad + feature_grad.reshape(grad.shape)
            grad = self.layers[i].backward(grad)
        return grad

    def shape_table(self):
        rows = [("input", "", self.input_dims, 0)]
        for i, layer in enumerate(self.layers):
            rows.append((layer.name, layer.describe(), self.shapes[i], layer.param_count))
        return rows

    def format_shape_table(self):
        lines = [f"{'layer':<14}{'type':<16}{'output':<22}{'params':>12}"]
        for name, kind, shape, count in self.shape_table():
            mark = " *" if name != "input" and self.tap is not None \
                and self.layers[self.tap].name == name else ""
            dims = "x".join(str(d) for d in shape)
            lines.append(f"{name:<14}{kind:<16}{dims + mark:<22}{count:>12}")
        lines.append(f"total parameters: {self.param_count}")
        return "\n".join(lines)


def _signature(layer):
    return (layer.n, layer.f, layer.s)


def _decoder_pairing(convs, deconvs, specs):
    """Map each written DC position to the index of the conv it mirrors.

    A decoder written innermost-first (mirror image of the encoder) runs as
    written. A decoder written in encoder order, as in
    ``C(a)-C(b)-...-DC(a)-DC(b)``, runs innermost-first.
    """
    K = len(convs)
    if len(deconvs) != K:
        raise ShapeError(f"{len(deconvs)} deconvolutions cannot mirror {K} convolutions")
    csig = [_signature(specs[i]) for i in convs]
    dsig = [_signature(specs[i]) for i in deconvs]
    if dsig == csig[::-1]:
        return [K - 1 - j for j in range(K)], False
    if dsig == csig:
        return [K - 1 - j for j in range(K)], True
    raise ShapeError("decoder deconvolutions do not mirror the encoder convolutions")


def _execution_order(spec_layers):
    convs = [i for i, s in enumerate(spec_layers) if isinstance(s, Conv)]
    deconvs = [i for i, s in enumerate(spec_layers) if isinstance(s, Deconv)]
    order = list(range(len(spec_layers)))
    mirror = {}
    if deconvs:
        pairing, reorder = _decoder_pairing(convs, deconvs, spec_layers)
        if reorder:
            for slot, pos in enumerate(deconvs):
                order[pos] = deconvs[len(deconvs) - 1 - slot]
        for slot, pos in enumerate(deconvs):
            mirror[pos] = pairing[slot]
    return order, convs, deconvs, mirror


def build_network(spec, input_dims=None, temporal_plan=None, rng=None, init_std=0.01,
                  allocate=True):
    """Instantiate a :class:`Network` from a spec, inferring every shape.

    With ``allocate=False`` only shapes and parameter counts are computed,
    which lets full-sized networks be checked without gigabytes of weights.
    """
    if isinstance(spec, str):
        spec = parse_shorthand(spec)
    input_dims = tuple(input_dims if input_dims is not None else spec.input_dims or ())
    if len(input_dims) != 4:
        raise ShapeError(f"input dims must be [T, C, H, W], got {input_dims}")
    if isinstance(temporal_plan, str):
        temporal_plan = parse_temporal_plan(temporal_plan)
    plan = tuple(temporal_plan if temporal_plan is not None else spec.temporal_plan)

    specs = list(spec.layers)
    order, convs, deconvs, mirror = _execution_order(specs)
    K = len(convs)
    if plan and len(plan) not in (K, 2 * K):
        raise ShapeError(f"temporal plan has {len(plan)} entries for {K} convolutions")
    conv_plan = list(plan[:K]) if plan else [(1, 1)] * K
    deconv_plan = list(plan[K:]) if len(plan) == 2 * K else None

    last_conv_pos = max(convs) if convs else -1
    first_dc_pos = min(deconvs) if deconvs else None
    core_fcs = [i for i, s in enumerate(specs) if isinstance(s, FullyConnected)
                and i > last_conv_pos and (first_dc_pos is None or i < first_dc_pos)]
    if deconvs and any(isinstance(s, FullyConnected) for i, s in enumerate(specs)
                       if i not in core_fcs):
        raise ShapeError("fully connected layers in an autoencoder must sit between "
                         "the encoder and the decoder")

    built, shapes, depth = [], [], []
    shape = input_dims
    conv_inputs = {}        # conv ordinal -> its input shape
    conv_ordinal = {pos: k for k, pos in enumerate(convs)}
    encoder_out = None
    encoder_end = min(core_fcs[:1] + deconvs[:1] + [len(specs)])
    counters = {}
    current_depth = -1
    tap = None

    def add(layer, d, idx):
        nonlocal shape
        kind = layer.kind
        layer.name = f"{kind}{counters.get(kind, 0)}"
        counters[kind] = counters.get(kind, 0) + 1
        try:
            shape = tuple(layer.output_shape(shape))
        except ValueError as exc:
            raise ShapeError(str(exc), idx) from None
        if any(s < 1 for s in shape):
            raise ShapeError(f"{layer.name} produces empty output {shape}", idx)
        built.append(layer)
        shapes.append(shape)
        depth.append(d)

    n_core_enc = (len(core_fcs) + 1) // 2
    for slot, pos in enumerate(order):
        s = specs[pos]
        idx = len(built)
        if isinstance(s, VelocitySpec):
            if len(shape) != 4:
                raise ShapeError("velocity layer needs a [T, C, H, W] input", idx)
            T = shape[0]
            w = velocity_weights(T, s.factor) if allocate else None
            add(L.Velocity(T, T, w, factor=s.factor), current_depth, idx)
        elif isinstance(s, Conv):
            k = conv_ordinal[pos]
            if len(shape) != 4:
                raise ShapeError("convolution needs a [T, C, H, W] input", idx)
            conv_inputs[k] = shape
            ft, st = conv_plan[k]
            current_depth = k
            add(L.Conv3D(shape[1], s.n, s.f, s.s, ft, st, relu=True), k, idx)
        elif isinstance(s, Deconv):
            k = mirror[slot]
            if len(shape) != 4:
                raise ShapeError("deconvolution needs a [T, C, H, W] input", idx)
            target_in = conv_inputs[k]
            if deconv_plan is not None:
                ft, st = deconv_plan[deconvs.index(slot)]
            else:
                ft, st = conv_plan[k]
            if s.n != shape[1]:
                raise ShapeError(f"DC({s.n},{s.f},{s.s}) consumes {s.n} channels "
                                 f"but receives {shape[1]}", idx)
            current_depth = k
            layer = L.Deconv3D(shape[1], target_in[1], s.f, s.s, ft, st,
                               target=(target_in[0], target_in[2], target_in[3]),
                               relu=True)
            add(layer, k, idx)
        elif isinstance(s, FullyConnected):
            n_in = math.prod(shape)
            core = pos in core_fcs
            add(L.FC(n_in, s.n, relu=True), K if core else current_depth, idx)
            if deconvs and core and core_fcs.index(pos) == n_core_enc - 1:
                tap = len(built) - 1
            if deconvs and core and pos == core_fcs[-1]:
                add(L.Unflatten(s.n, encoder_out, relu=True), K, len(built))
        elif isinstance(s, Norm):
            add(L.LRN(), current_depth, idx)
        if pos < encoder_end:
            encoder_out = shape

    if not deconvs and built and isinstance(built[-1], L.FC):
        built[-1].relu = False
    if deconvs:
        last_dc = max(i for i, layer in enumerate(built) if isinstance(layer, L.Deconv3D))
        built[last_dc].relu = False
        if tap is None:
            # no fully connected core: features are the encoder's last output
            tap = min(i for i, layer in enumerate(built) if isinstance(layer, L.Deconv3D)) - 1
        if shape != input_dims:
            raise ShapeError(f"decoder output {shape} does not match input {input_dims}")
    net = Network(built, shapes, input_dims, tap=tap, depth=depth, n_pairs=K)
    if allocate:
        net.init_params(rng if rng is not None else np.random.default_rng(0), init_std)
    return net


class MultiVelocityNet:
    """Parallel velocity-layer + autoencoder branches feeding one predictor head.

    ``forward`` returns per-branch reconstructions, per-branch reconstruction
    targets (each branch's velocity-layer output, treated as a constant) and
    the head's logits.
    """

    def __init__(self, velocities, branches, head, factors):
        self.velocities = velocities
        self.branches = branches
        self.head = head
        self.factors = list(factors)

    @property
    def concat_width(self):
        return sum(b.feature_width for b in self.branches)

    @property
    def param_count(self):
        return (sum(v.param_count for v in self.velocities)
                + sum(b.param_count for b in self.branches) + self.head.param_count)

    def named_layers(self):
        out = []
        for k, (v, b) in enumerate(zip(self.velocities, self.branches)):
            out.append((f"b{k}.{v.name}", v))
            out.extend(b.named_layers(prefix=f"b{k}."))
        out.extend(self.head.named_layers(prefix="head."))
        return out

    def branch_layers(self):
        return [(n, layer) for n, layer in self.named_layers() if not n.startswith("head.")]

    def head_layers(self):
        return [(n, layer) for n, layer in self.named_layers() if n.startswith("head.")]

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def forward(self, x):
        recons, targets, feats = [], [], []
        for v, b in zip(self.velocities, self.branches):
            vin = v.forward(x)
            recons.append(b.forward(vin))
            targets.append(vin.copy())
            feats.append(b.features)
        self._widths = [f.shape[1] for f in feats]
        logits = self.head.forward(np.concatenate(feats, axis=1))
        return recons, targets, logits

    def predict(self, x):
        feats = []
        for v, b in zip(self.velocities, self.branches):
            b.forward(v.forward(x))
            feats.append(b.features)
        return self.head.forward(np.concatenate(feats, axis=1))

    def backward(self, recon_grads, logit_grad=None):
        feat_grads = [None] * len(self.branches)
        if logit_grad is not None:
            g = self.head.backward(logit_grad)
            feat_grads = np.split(g, np.cumsum(self._widths)[:-1], axis=1)
        for v, b, rg, fg in zip(self.velocities, self.branches, recon_grads, feat_grads):
            if rg is None and fg is None:
                continue
            v.backward(b.backward(rg, fg))


def head_layers_from(predictor, base):
    """The fully connected tail of ``predictor`` that sits on top of ``base``'s features.

    A predictor written in full (encoder layers, then the head) must repeat
    the autoencoder's encoder up to and including its feature layer.
    """
    pl = list(predictor.layers)
    if not any(isinstance(s, (Conv, Deconv)) for s in pl):
        return pl
    bl = list(base.layers)
    convs = [i for i, s in enumerate(bl) if isinstance(s, Conv)]
    decoder = min(i for i, s in enumerate(bl) if isinstance(s, Deconv))
    core = [i for i, s in enumerate(bl) if isinstance(s, FullyConnected)
            and max(convs) < i < decoder]
    prefix = bl[:core[(len(core) + 1) // 2 - 1] + 1] if core else bl[:decoder]
    if pl[:len(prefix)] != prefix:
        raise ShapeError("predictor does not share the autoencoder's encoder; "
                         "concatenated feature width would not match its head")
    return pl[len(prefix):]


def build_multivelocity(base, factors, head, input_dims=None, temporal_plan=None, rng=None,
                        init_std=0.01, allocate=True, branch_init=None):
    """One spline velocity layer and one autoencoder per factor, plus a predictor head.

    ``branch_init`` is an optional callable applied to every freshly built
    branch network (used to copy in shared pretrained weights).
    """
    if isinstance(base, str):
        base = parse_shorthand(base)
    if isinstance(head, str):
        head = parse_shorthand(head)
    factors = parse_factors(factors)
    if not factors:
        raise ValueError("need at least one velocity factor")
    rng = rng if rng is not None else np.random.default_rng(0)
    input_dims = tuple(input_dims if input_dims is not None else base.input_dims)
    velocities, branches = [], []
    for f in factors:
        v = L.Velocity(input_dims[0], input_dims[0], factor=f)
        if allocate:
            v.init_weights = velocity_weights(input_dims[0], f)
            v.init_params()
        v.name = "velocity"
        velocities.append(v)
        b = build_network(base, input_dims, temporal_plan, rng=rng, init_std=init_std,
                          allocate=allocate)
        if not b.is_autoencoder:
            raise ShapeError("multi-velocity branches must be autoencoders")
        if branch_init is not None:
            branch_init(b)
        branches.append(b)
    width = sum(b.feature_width for b in branches)
    head_specs = head_layers_from(head, base)
    if not head_specs or not all(isinstance(s, FullyConnected) for s in head_specs):
        raise ShapeError("predictor head must be a non-empty chain of FC layers")
    head_net = build_network(NetworkSpec(tuple(head_specs)), (1, 1, 1, width), (),
                             rng=rng, init_std=init_std, allocate=allocate)
    return MultiVelocityNet(velocities, branches, head_net, factors)
