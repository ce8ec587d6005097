"""Residual U-Net denoiser over spectral cubes, with its training loop.

The cube enters as a single-channel (1, B, H, W) volume. Each encoder level
applies extractor blocks at a fixed width, then a stride-2 convolution over
the two spatial axes only, so the band axis survives the whole encoder.
Decoding mirrors with nearest-neighbor upsampling plus convolution and
channel-concat skip connections. A zero-initialized 1x1x1 projection plus a
global input residual make the untrained network the identity map.

Training follows a halving learning-rate schedule with bias-corrected Adam,
corrupts each sample freshly per epoch from a per-(seed, cube) random
stream, and is bit-reproducible for a fixed seed at one BLAS thread.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    Parameter,
    Tape,
    Var,
    add,
    backward,
    conv3d,
    concat_channels,
    l1_loss,
    leaky_relu,
    upsample_nearest2x,
)
from .conv import ConvSpec
from .errors import FormatError, ShapeError, StateError, TrainingDivergedError
from .extractors import ConvLayer, ExtractorBlock, make_extractor, _init_weight
from .kernel_analysis import validate_scheme
from .noise import NoiseSpec, corrupt

CHECKPOINT_MAGIC = b"RCKP"
CHECKPOINT_VERSION = 1


@dataclass
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    scheme: str = "reconvset"
    blocks_per_level: int = 2
    skip_mode: str = "concat"
    global_residual: bool = True
    k: int = 3
    activation: str = "leaky_relu"

    def __post_init__(self):
        validate_scheme(self.scheme)
        if self.levels < 1 or self.base_channels < 1 or self.blocks_per_level < 1:
            raise ShapeError("levels, base_channels, blocks_per_level must be >= 1")
        if self.skip_mode != "concat":
            raise ShapeError(f"unsupported skip mode {self.skip_mode!r}")


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    halve_every: int = 5
    epochs: int = 25
    batch: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


class DenoisingUNet:
    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        ch = [config.base_channels * 2**i for i in range(config.levels)]
        self._params: list[Parameter] = []

        def track(obj):
            self._params.extend(obj.parameters())
            return obj

        def plain_conv(name, cin, cout, kernel_shape, zero=False):
            spec = ConvSpec(cout, cin, kernel_shape, bias_enabled=True)
            if zero:
                w = np.zeros(spec.weight_shape, dtype=dtype)
            else:
                w = _init_weight(rng, spec.weight_shape, dtype)
            layer = ConvLayer(
                "conv",
                spec,
                Parameter(f"{name}.weight", w),
                Parameter(f"{name}.bias", np.zeros(cout, dtype=dtype)),
            )
            return track(layer)

        def blocks(prefix, cin, width):
            made = []
            for i in range(config.blocks_per_level):
                blk = make_extractor(
                    config.scheme,
                    cin if i == 0 else width,
                    width,
                    k=config.k,
                    rng=rng,
                    name=f"{prefix}.block{i}",
                    dtype=dtype,
                    activation=config.activation,
                )
                made.append(track(blk))
            return made

        self.encoder: list[list[ExtractorBlock]] = []
        self.down: list[ConvLayer] = []
        for lvl in range(config.levels):
            cin = 1 if lvl == 0 else ch[lvl]
            self.encoder.append(blocks(f"enc{lvl}", cin, ch[lvl]))
            if lvl < config.levels - 1:
                self.down.append(
                    plain_conv(f"down{lvl}", ch[lvl], ch[lvl + 1], (1, 3, 3))
                )

        self.up: list[ConvLayer] = []
        self.decoder: list[list[ExtractorBlock]] = []
        for lvl in reversed(range(config.levels - 1)):
            # pointwise projection after nearest-neighbor upsampling; the
            # decoder blocks that follow carry the spatial mixing
            self.up.append(plain_conv(f"up{lvl}", ch[lvl + 1], ch[lvl], (1, 1, 1)))
            self.decoder.append(blocks(f"dec{lvl}", 2 * ch[lvl], ch[lvl]))

        self.exit = plain_conv("exit", ch[0], 1, (1, 1, 1), zero=True)

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def param_count(self) -> int:
        return sum(p.value.size for p in self._params)

    def _check_dims(self, cube: np.ndarray):
        if cube.ndim != 3:
            raise ShapeError(f"expected a (B,H,W) cube, got shape {cube.shape}")
        div = 2 ** (self.config.levels - 1)
        _, h, w = cube.shape
        if h % div or w % div:
            raise ShapeError(
                f"spatial dims {h}x{w} must be divisible by {div} "
                f"for {self.config.levels} levels"
            )

    def forward(self, tape: Tape | None, cube: np.ndarray) -> Var:
        """Run the network over one cube; returns a (B,H,W,1) variable."""
        self._check_dims(cube)
        cube = np.asarray(cube, dtype=self.dtype)
        entry = cube[..., None]  # single-channel, channels-last
        x = tape.input(entry) if tape is not None else Var(entry)

        h = x
        skips = []
        for lvl in range(self.config.levels):
            for blk in self.encoder[lvl]:
                h = blk.forward(tape, h)
            if lvl < self.config.levels - 1:
                skips.append(h)
                down = self.down[lvl]
                h = conv3d(
                    tape, h, down.weight, down.bias,
                    padding=down.spec.padding, stride=(1, 2, 2),
                )
                h = leaky_relu(tape, h)

        for i, lvl in enumerate(reversed(range(self.config.levels - 1))):
            up = self.up[i]
            h = upsample_nearest2x(tape, h)
            h = conv3d(tape, h, up.weight, up.bias, padding=up.spec.padding)
            h = leaky_relu(tape, h)
            h = concat_channels(tape, [h, skips[lvl]])
            for blk in self.decoder[i]:
                h = blk.forward(tape, h)

        correction = conv3d(
            tape, h, self.exit.weight, self.exit.bias, padding=(0, 0, 0)
        )
        if self.config.global_residual:
            return add(tape, x, correction)
        return correction

    def denoise(self, cube: np.ndarray) -> np.ndarray:
        """Untraced forward pass; returns a (B,H,W) cube."""
        return self.forward(None, cube).value[..., 0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: list[Parameter]):
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}


def adam_step(
    params: list[Parameter],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Standard bias-corrected Adam update, applied in place."""
    state.t += 1
    t = state.t
    for p in params:
        g = grads[p.name]
        if g.shape != p.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter "
                f"{p.name} shape {p.value.shape}"
            )
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(
    model: DenoisingUNet,
    clean_cubes: list[np.ndarray],
    cfg: TrainConfig,
    noise_spec: NoiseSpec | None = None,
    out_dir: str | Path | None = None,
    extra_config: dict | None = None,
) -> list[float]:
    """Train in place on clean cubes; returns the per-epoch mean loss log.

    Each sample is corrupted freshly every epoch from a random stream keyed
    by (cfg.seed, epoch, sample index), so with the default blind spec every
    draw sees its own noise level from the blind range. A checkpoint is
    written per epoch when ``out_dir`` is given. Aborts on a non-finite loss.
    """
    if not clean_cubes:
        raise ValueError("training dataset is empty")
    for cube in clean_cubes:
        model._check_dims(cube)
    spec = noise_spec if noise_spec is not None else NoiseSpec("blind", seed=cfg.seed)
    params = model.parameters()
    state = AdamState(params)
    n = len(clean_cubes)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    loss_log: list[float] = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng((cfg.seed, 10_000 + epoch)).permutation(n)
        epoch_losses = []
        for step, start in enumerate(range(0, n, cfg.batch)):
            idx = order[start : start + cfg.batch]
            accum = {p.name: np.zeros(p.value.shape, dtype=np.float64) for p in params}
            batch_loss = 0.0
            for i in idx:
                draw = dataclasses.replace(
                    spec, seed=cfg.seed, cube_id=epoch * n + int(i)
                )
                noisy = corrupt(clean_cubes[i], draw)
                tape = Tape()
                tape.watch(params)
                out = model.forward(tape, noisy)
                target = clean_cubes[i][..., None].astype(model.dtype)
                loss = l1_loss(tape, out, target)
                batch_loss += float(loss.value)
                for name, g in backward(tape, loss).items():
                    accum[name] += g
            batch_loss /= len(idx)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, step, lr, batch_loss)
            grads = {
                name: (acc / len(idx)).astype(model.dtype) for name, acc in accum.items()
            }
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            epoch_losses.append(batch_loss)
        loss_log.append(float(np.mean(epoch_losses)))
        if out_path is not None:
            save_checkpoint(
                out_path / f"epoch_{epoch:03d}.rckp", model, cfg, extra_config
            )
    return loss_log


# ---------------------------------------------------------------------------
# checkpoint format: magic "RCKP", u32 version, length-prefixed key=value
# config text, then per parameter (registration order): u32 name length,
# name bytes, u32 ndim, u32 dims, float32 little-endian data.
# ---------------------------------------------------------------------------

def _config_text(model: DenoisingUNet, train_cfg: TrainConfig | None, extra: dict | None) -> str:
    items = dataclasses.asdict(model.config)
    if train_cfg is not None:
        items.update({f"train.{k}": v for k, v in dataclasses.asdict(train_cfg).items()})
    if extra:
        items.update(extra)
    return "".join(f"{k}={v}\n" for k, v in items.items())


def save_checkpoint(
    path: str | Path,
    model: DenoisingUNet,
    train_cfg: TrainConfig | None = None,
    extra_config: dict | None = None,
) -> None:
    cfg_bytes = _config_text(model, train_cfg, extra_config).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
    ]
    for p in model.parameters():
        name = p.name.encode("utf-8")
        shape = p.value.shape
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], list[tuple[str, np.ndarray]]]:
    raw = Path(path).read_bytes()

    def need(offset, count, what):
        if offset + count > len(raw):
            raise FormatError(
                f"truncated checkpoint: need {count} bytes for {what} at byte "
                f"offset {offset}, file has {len(raw)}"
            )

    need(0, 4, "magic")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r} at byte offset 0")
    need(4, 8, "header")
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    off = 12
    need(off, cfg_len, "config block")
    config = {}
    for line in raw[off : off + cfg_len].decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    off += cfg_len

    params = []
    while off < len(raw):
        need(off, 4, "parameter name length")
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        need(off, name_len, "parameter name")
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        need(off, 4, "parameter rank")
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        need(off, 4 * ndim, "parameter shape")
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        need(off, 4 * count, f"data of {name}")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params.append((name, data.copy()))
    return config, params


def load_checkpoint_into(model: DenoisingUNet, path: str | Path) -> dict[str, str]:
    """Load parameter values into an already-built model; returns the config."""
    config, stored = read_checkpoint(path)
    own = model.parameters()
    if len(own) != len(stored):
        raise FormatError(
            f"checkpoint has {len(stored)} parameters, model has {len(own)}"
        )
    for p, (name, value) in zip(own, stored):
        if p.name != name:
            raise FormatError(f"parameter order mismatch: {p.name} vs {name}")
        if p.value.shape != value.shape:
            raise FormatError(
                f"parameter {name} shape {value.shape} does not match model "
                f"{p.value.shape}"
            )
        p.value[...] = value.astype(model.dtype)
    return config


def model_from_checkpoint(path: str | Path) -> tuple[DenoisingUNet, dict[str, str]]:
    config, _ = read_checkpoint(path)
    try:
        unet_cfg = UNetConfig(
            levels=int(config["levels"]),
            base_channels=int(config["base_channels"]),
            scheme=config["scheme"],
            blocks_per_level=int(config["blocks_per_level"]),
            skip_mode=config["skip_mode"],
            global_residual=config["global_residual"] == "True",
            k=int(config["k"]),
            activation=config["activation"],
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint config is missing key {exc}") from exc
    model = DenoisingUNet(unet_cfg, seed=0)
    load_checkpoint_into(model, path)
    return model, config
