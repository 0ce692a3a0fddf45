"""The two TCN onset-detection architectures.

Both variants share one skeleton of 15 named layers:

    Conv1 Conv2 Conv3   Tcn1 Tcn2 Tcn4 ... Tcn1024   Out

The three conv stages reduce 81 frequency bands to exactly 1 (valid
convolution in frequency, zero-padded in time so frame count is
preserved), the 11 TCN levels run dilated convolutions at rates 2^0..2^10
over the 16-channel sequence, and Out is a dense layer to a single
sigmoid unit per frame.

tcn_v1: conv stages with 16 filters (3x3 pool, 3x3 pool, 1x8); each TCN
level is dilated conv(k=5, d) -> ELU -> dropout -> 1x1 mix -> residual.

tcn_v2: conv stages with 20 filters (3x3 pool, 1x10 pool, 3x3 pool); a
1x1 adapter brings 20 channels to 16 at the Tcn1 entry; each TCN level
runs two sequential dilated convs (d then 2d) before ELU -> dropout ->
1x1 mix -> residual, doubling the temporal growth per level.

Parameters are stored float32; all compute runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ModelFormatError, ShapeError
from .layers import Conv2d, Dense, DilatedConv1d, Dropout, Elu, MaxPoolFreq3, Sigmoid

VARIANTS = ("tcn_v1", "tcn_v2")
TCN_CHANNELS = 16
N_BANDS = 81
FORMAT_VERSION = 1
MAGIC = "onsetkit-model"

LAYER_NAMES = tuple(
    ["Conv1", "Conv2", "Conv3"] + [f"Tcn{2**i}" for i in range(11)] + ["Out"]
)
FREEZABLE = LAYER_NAMES[:-1]  # Out is always trainable


@dataclass(frozen=True)
class ActivationFunction:
    """Per-frame onset likelihoods in (0,1) at 100 frames/s."""

    values: np.ndarray
    frame_rate: int = 100

    def __len__(self) -> int:
        return len(self.values)


class ConvStage:
    """conv -> ELU -> dropout (-> freq pool); time zero-padded to length."""

    def __init__(self, kt, kf, cin, cout, pool, rate, rng, dtype=np.float32):
        self.conv = Conv2d(kt, kf, cin, cout, rng=rng, dtype=dtype)
        self.elu = Elu()
        self.drop = Dropout(rate)
        self.pool = MaxPoolFreq3() if pool else None
        self.pad_t = (kt - 1) // 2
        self.rf_add = kt - 1

    def forward(self, x, training, rng):
        if self.pad_t:
            x = np.pad(x, ((self.pad_t, self.pad_t), (0, 0), (0, 0)))
        x = self.drop.forward(self.elu.forward(self.conv.forward(x)), training=training, rng=rng)
        return self.pool.forward(x) if self.pool else x

    def backward(self, gy):
        if self.pool:
            gy = self.pool.backward(gy)
        gy = self.conv.backward(self.elu.backward(self.drop.backward(gy)))
        return gy[self.pad_t : gy.shape[0] - self.pad_t] if self.pad_t else gy

    def out_bands(self, bands):
        bands = bands - self.conv.kf + 1
        return bands // 3 if self.pool else bands

    @property
    def params(self):
        return {f"conv.{k}": v for k, v in self.conv.params.items()}

    @property
    def grads(self):
        return {f"conv.{k}": v for k, v in self.conv.grads.items()}


class TcnLevel:
    """Dilated conv(s) -> ELU -> dropout -> 1x1 mix -> residual add."""

    def __init__(self, dilation, double, adapter_in, rate, rng, dtype=np.float32):
        self.adapter = Dense(adapter_in, TCN_CHANNELS, rng=rng, dtype=dtype) if adapter_in else None
        self.conv1 = DilatedConv1d(5, TCN_CHANNELS, TCN_CHANNELS, dilation, rng=rng, dtype=dtype)
        self.conv2 = (
            DilatedConv1d(5, TCN_CHANNELS, TCN_CHANNELS, 2 * dilation, rng=rng, dtype=dtype)
            if double
            else None
        )
        self.elu = Elu()
        self.drop = Dropout(rate)
        self.mix = Dense(TCN_CHANNELS, TCN_CHANNELS, rng=rng, dtype=dtype)
        self.rf_add = 4 * dilation + (8 * dilation if double else 0)

    def forward(self, x, training, rng):
        if self.adapter:
            x = self.adapter.forward(x)
        h = self.conv1.forward(x)
        if self.conv2:
            h = self.conv2.forward(h)
        h = self.drop.forward(self.elu.forward(h), training=training, rng=rng)
        return x + self.mix.forward(h)

    def backward(self, gy):
        gh = self.elu.backward(self.drop.backward(self.mix.backward(gy)))
        if self.conv2:
            gh = self.conv2.backward(gh)
        gx = self.conv1.backward(gh) + gy
        return self.adapter.backward(gx) if self.adapter else gx

    def _subs(self):
        subs = {"conv1": self.conv1, "mix": self.mix}
        if self.conv2:
            subs["conv2"] = self.conv2
        if self.adapter:
            subs["adapter"] = self.adapter
        return subs

    @property
    def params(self):
        return {f"{s}.{k}": v for s, l in self._subs().items() for k, v in l.params.items()}

    @property
    def grads(self):
        return {f"{s}.{k}": v for s, l in self._subs().items() for k, v in l.grads.items()}


class OutHead:
    """Dense to one unit per frame, sigmoid."""

    rf_add = 0

    def __init__(self, rng, dtype=np.float32):
        self.dense = Dense(TCN_CHANNELS, 1, rng=rng, dtype=dtype)
        self.sig = Sigmoid()

    def forward(self, x, training, rng):
        return self.sig.forward(self.dense.forward(x))[:, 0]

    def backward(self, gy):
        return self.dense.backward(self.sig.backward(gy[:, None]))

    @property
    def params(self):
        return {f"dense.{k}": v for k, v in self.dense.params.items()}

    @property
    def grads(self):
        return {f"dense.{k}": v for k, v in self.dense.grads.items()}


@dataclass
class NamedLayer:
    name: str
    kind: str  # conv-stage | tcn-level | output
    block: object
    dilation: int | None = None
    trainable: bool = True


class Model:
    def __init__(self, variant, seed, layers, dropout_rate):
        self.variant = variant
        self.seed = seed
        self.layers = layers
        self.dropout_rate = dropout_rate

    @property
    def optimizer_kind(self) -> str:
        return "adam" if self.variant == "tcn_v1" else "radam_lookahead"

    def layer(self, name: str) -> NamedLayer:
        for nl in self.layers:
            if nl.name == name:
                return nl
        raise KeyError(f"unknown layer {name!r}")

    def forward(self, features, training=False, rng=None):
        x = np.asarray(getattr(features, "values", features), dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != N_BANDS:
            raise ShapeError(f"expected (frames, {N_BANDS}) features, got {x.shape}")
        n = x.shape[0]
        x = x[:, :, None]  # time x freq x 1 channel
        for nl in self.layers:
            if nl.kind == "conv-stage":
                x = nl.block.forward(x, training, rng)
            elif nl.kind == "tcn-level":
                if x.ndim == 3:  # leave the front-end: squeeze the unit band
                    assert x.shape[1] == 1
                    x = x[:, 0, :]
                x = nl.block.forward(x, training, rng)
            else:
                x = nl.block.forward(x, training, rng)
        assert x.shape == (n,)
        return x

    def backward(self, g_activation):
        g = np.asarray(g_activation, dtype=np.float64)
        for nl in reversed(self.layers):
            g = nl.block.backward(g)
            if nl.name == "Tcn1":  # entering the front-end: restore band axis
                g = g[:, None, :]
        return g

    def param_dict(self, trainable_only=False) -> dict[str, np.ndarray]:
        out = {}
        for nl in self.layers:
            if trainable_only and not nl.trainable:
                continue
            for k, v in nl.block.params.items():
                out[f"{nl.name}.{k}"] = v
        return out

    def grad_dict(self, trainable_only=False) -> dict[str, np.ndarray]:
        out = {}
        for nl in self.layers:
            if trainable_only and not nl.trainable:
                continue
            for k, v in nl.block.grads.items():
                out[f"{nl.name}.{k}"] = v
        return out


def layer_names(model: Model | None = None) -> tuple[str, ...]:
    return LAYER_NAMES


def build_model(
    variant: str,
    seed: int,
    n_bands: int = N_BANDS,
    dropout_rate: float = 0.1,
    dtype=np.float32,
) -> Model:
    """Construct an initialized model; only 81 input bands are supported."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if n_bands != N_BANDS:
        raise ConfigError(f"the front-ends require {N_BANDS} bands, got {n_bands}")
    rng = np.random.default_rng(seed)
    rate = dropout_rate
    layers = []
    if variant == "tcn_v1":
        stages = [
            ConvStage(3, 3, 1, 16, True, rate, rng, dtype),
            ConvStage(3, 3, 16, 16, True, rate, rng, dtype),
            ConvStage(1, 8, 16, 16, False, rate, rng, dtype),
        ]
    else:
        stages = [
            ConvStage(3, 3, 1, 20, True, rate, rng, dtype),
            ConvStage(1, 10, 20, 20, True, rate, rng, dtype),
            ConvStage(3, 3, 20, 20, True, rate, rng, dtype),
        ]
    bands = n_bands
    for i, st in enumerate(stages):
        layers.append(NamedLayer(f"Conv{i + 1}", "conv-stage", st))
        bands = st.out_bands(bands)
    assert bands == 1, f"front-end must end at 1 band, got {bands}"
    front_channels = stages[-1].conv.cout
    for i in range(11):
        d = 2**i
        adapter_in = front_channels if i == 0 and front_channels != TCN_CHANNELS else None
        lvl = TcnLevel(
            d, double=(variant == "tcn_v2"), adapter_in=adapter_in, rate=rate, rng=rng, dtype=dtype
        )
        layers.append(NamedLayer(f"Tcn{d}", "tcn-level", lvl, dilation=d))
    layers.append(NamedLayer("Out", "output", OutHead(rng, dtype)))
    return Model(variant, seed, layers, rate)


def forward(model: Model, features, training=False, rng=None) -> ActivationFunction:
    return ActivationFunction(values=model.forward(features, training=training, rng=rng))


def count_params(model: Model) -> tuple[int, dict[str, int]]:
    """Total parameter count and a per-layer breakdown."""
    breakdown = {
        nl.name: int(sum(v.size for v in nl.block.params.values())) for nl in model.layers
    }
    return sum(breakdown.values()), breakdown


def receptive_field(model: Model, through_layer: str) -> tuple[int, float]:
    """Temporal receptive field through the named layer: (frames, ms)."""
    if through_layer not in LAYER_NAMES:
        raise KeyError(f"unknown layer {through_layer!r}")
    frames = 1
    for nl in model.layers:
        frames += nl.block.rf_add
        if nl.name == through_layer:
            break
    return frames, frames * 1000.0 / 100


@dataclass(frozen=True)
class FreezeConfig:
    """Contiguous segment of non-output layers exempt from updates.

    Canonical ids: "ft" (nothing frozen) and "ft_<Layer>" (frozen from
    Conv1 through <Layer>). Arbitrary contiguous segments are accepted as
    "ft_<A>-<B>".
    """

    id: str
    frozen: tuple[str, ...]

    @classmethod
    def from_id(cls, spec: str) -> "FreezeConfig":
        if spec == "ft":
            return cls(id=spec, frozen=())
        if not spec.startswith("ft_"):
            raise ConfigError(f"freeze id must be 'ft' or 'ft_...', got {spec!r}")
        seg = spec[3:]
        if "-" in seg:
            first, last = seg.split("-", 1)
        else:
            first, last = "Conv1", seg
        for name in (first, last):
            if name == "Out":
                raise ConfigError("the output layer is always trainable")
            if name not in FREEZABLE:
                raise ConfigError(f"unknown layer {name!r} in freeze id {spec!r}")
        a, b = FREEZABLE.index(first), FREEZABLE.index(last)
        if a > b:
            raise ConfigError(f"freeze segment reversed in {spec!r}")
        return cls(id=spec, frozen=FREEZABLE[a : b + 1])


def canonical_freeze_ids() -> list[str]:
    """The 15 canonical configs: none frozen plus every prefix."""
    return ["ft"] + [f"ft_{name}" for name in FREEZABLE]


def apply_freeze(model: Model, config: FreezeConfig) -> Model:
    """Set trainable flags from the config (idempotent); returns the model."""
    for name in config.frozen:
        if name == "Out":
            raise ConfigError("the output layer is always trainable")
        if name not in LAYER_NAMES:
            raise ConfigError(f"unknown layer {name!r}")
    for nl in model.layers:
        nl.trainable = nl.name not in config.frozen
    return model


def clone_model(model: Model) -> Model:
    """Independent copy with identical parameters (all layers trainable)."""
    twin = build_model(model.variant, model.seed, dropout_rate=model.dropout_rate)
    src, dst = model.param_dict(), twin.param_dict()
    for k, v in src.items():
        dst[k][...] = v
    return twin


def save_model(model: Model, path) -> None:
    """Text header (variant, seed, tensor shapes) + little-endian f32 blob."""
    names = list(model.param_dict())
    arrays = model.param_dict()
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"variant {model.variant}",
        f"seed {model.seed}",
        f"dropout {model.dropout_rate!r}",
    ]
    total = 0
    for name in names:
        shape = arrays[name].shape
        lines.append(f"tensor {name} {' '.join(map(str, shape))}")
        total += arrays[name].size
    lines.append(f"blob {total}")
    blob = b"".join(arrays[n].astype("<f4", copy=False).tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(blob)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    head_end = data.find(b"blob ")
    if head_end < 0:
        raise ModelFormatError("missing blob marker")
    nl_pos = data.find(b"\n", head_end)
    header = data[:nl_pos].decode("ascii", errors="replace").splitlines()
    blob = data[nl_pos + 1 :]

    fields: dict[str, str] = {}
    tensors: list[tuple[str, tuple[int, ...]]] = []
    for i, line in enumerate(header):
        parts = line.split()
        if i == 0:
            if parts[:1] != [MAGIC] or len(parts) != 2:
                raise ModelFormatError(f"not a model file: {line!r}")
            if int(parts[1]) != FORMAT_VERSION:
                raise ModelFormatError(f"unsupported format version {parts[1]}")
        elif parts[0] == "tensor":
            tensors.append((parts[1], tuple(int(s) for s in parts[2:])))
        elif parts[0] == "blob":
            pass
        else:
            fields[parts[0]] = parts[1]
    declared = int(header[-1].split()[1])
    if declared != sum(int(np.prod(s)) for _, s in tensors):
        raise ModelFormatError("blob size disagrees with tensor shapes")
    if len(blob) != declared * 4:
        raise ModelFormatError(f"blob holds {len(blob)} bytes, expected {declared * 4}")

    model = build_model(fields["variant"], int(fields["seed"]), dropout_rate=float(fields["dropout"]))
    params = model.param_dict()
    if [n for n, _ in tensors] != list(params):
        raise ModelFormatError("tensor list does not match the declared variant")
    offset = 0
    for name, shape in tensors:
        if params[name].shape != shape:
            raise ModelFormatError(f"{name}: shape {shape} does not match {params[name].shape}")
        size = int(np.prod(shape))
        vals = np.frombuffer(blob, dtype="<f4", count=size, offset=offset * 4)
        params[name][...] = vals.reshape(shape)
        offset += size
    return model
