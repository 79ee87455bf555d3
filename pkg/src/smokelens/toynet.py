"""Desk-scale trainable model and its training loop.

Three sub-networks: a latent-variable generator with dropout (stride-2 conv
encoder, latent tiling + fusion, nearest-upsample decoder to logits), an
inference network producing the latent posterior (mu, log sigma), and a
sampling-free uncertainty head (shared encoder, two decoders regressing the
predictive and aleatoric maps). Training alternates a generator/inference
update on the weighted total loss with an uncertainty-head update against
Monte-Carlo targets. Everything is driven by seeds derived from a root seed,
so runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import losses as L
from .diffcore import DiffValue
from .imagecore import GrayMap, ImageRGB
from .losses import CoherenceConfig, LossWeights
from .synthdata import LabeledScene, derive_seed
from .transmission import TransmissionConfig, estimate_transmission
from .uncertainty import SampleSet, decompose, mean_prediction

CHECKPOINT_MAGIC = b"SMOKELENS-CKPT"
CHECKPOINT_VERSION = 1

DOWNSAMPLE_FACTOR = 8
GEN_ENC_WIDTHS = (8, 16, 32)
GEN_DEC_WIDTHS = (16, 8, 8)
INF_WIDTHS = (8, 16, 16, 32, 32)
UNC_ENC_WIDTHS = (8, 12, 12, 16, 16)
UNC_DEC_WIDTHS = (8, 8)
LRELU_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class InvalidCheckpointError(Exception):
    """Checkpoint bytes do not match the expected container format/version."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 8
    batch_size: int = 1
    mc_samples: int = 10
    latent_dim: int = 8
    dropout: float = 0.3
    lr_gen: float = 2.5e-5
    lr_unc: float = 1.5e-5
    lr_scale: float = 100.0
    lr_decay: float = 0.8
    lr_decay_epoch: int = 40
    lambda1: float = 0.3
    lambda2: float = 0.01
    entropy_mode: str = "calibrated"  # "calibrated" | "plain"
    coherence_k: int = 5
    sigma_p: float = 5.0
    sigma_t: float = 0.1
    pool_k: int = 0  # 0 -> auto from image size

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.mc_samples < 1:
            raise ValueError("epochs, batch_size and mc_samples must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.entropy_mode not in ("calibrated", "plain"):
            raise ValueError(f"unknown entropy_mode {self.entropy_mode!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def coherence_config(self) -> CoherenceConfig:
        return CoherenceConfig(k=self.coherence_k, sigma_p=self.sigma_p, sigma_t=self.sigma_t)


# -- parameters ---------------------------------------------------------------


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int = 3):
    # Variance-preserving uniform bound; keeps activations from shrinking
    # through the stacked conv blocks.
    bound = np.sqrt(6.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    b = np.zeros((1, cout, 1, 1))
    return w, b


def _add_conv(params, rng, name, cout, cin, k=3):
    params[f"{name}_w"], params[f"{name}_b"] = _conv_init(rng, cout, cin, k)


def _add_bn(params, buffers, name, c):
    params[f"{name}_g"] = np.ones((1, c, 1, 1))
    params[f"{name}_beta"] = np.zeros((1, c, 1, 1))
    buffers[f"{name}_rm"] = np.zeros((1, c, 1, 1))
    buffers[f"{name}_rv"] = np.ones((1, c, 1, 1))


def init_parameters(seed: int, latent_dim: int) -> tuple[dict, dict]:
    """All weights for the three sub-networks, plus batch-norm buffers."""
    rng = np.random.default_rng(derive_seed(seed, "init"))
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    w1, w2, w3 = GEN_ENC_WIDTHS
    d1, d2, d3 = GEN_DEC_WIDTHS
    _add_conv(params, rng, "g_enc1", w1, 3)
    _add_conv(params, rng, "g_enc2", w2, w1)
    _add_conv(params, rng, "g_enc3", w3, w2)
    _add_conv(params, rng, "g_fuse", w3, w3 + latent_dim)
    _add_conv(params, rng, "g_dec1", d1, w3)
    _add_conv(params, rng, "g_dec2", d2, d1)
    _add_conv(params, rng, "g_dec3", d3, d2)
    _add_conv(params, rng, "g_out", 1, d3)

    i1, i2, i3, i4, i5 = INF_WIDTHS
    _add_conv(params, rng, "i_c1", i1, 3)
    _add_conv(params, rng, "i_c2", i2, i1)
    _add_conv(params, rng, "i_c3", i3, i2)
    _add_conv(params, rng, "i_c4", i4, i3)
    _add_conv(params, rng, "i_c5", i5, i4)
    _add_conv(params, rng, "i_mu", latent_dim, i5, k=1)
    _add_conv(params, rng, "i_ls", latent_dim, i5, k=1)

    e1, e2, e3, e4, e5 = UNC_ENC_WIDTHS
    _add_conv(params, rng, "u_e1", e1, 4)
    _add_bn(params, buffers, "u_e1_bn", e1)
    _add_conv(params, rng, "u_e2", e2, e1)
    _add_bn(params, buffers, "u_e2_bn", e2)
    _add_conv(params, rng, "u_e3", e3, e2)
    _add_bn(params, buffers, "u_e3_bn", e3)
    _add_conv(params, rng, "u_e4", e4, e3)
    _add_bn(params, buffers, "u_e4_bn", e4)
    _add_conv(params, rng, "u_e5", e5, e4)
    _add_bn(params, buffers, "u_e5_bn", e5)
    f1, f2 = UNC_DEC_WIDTHS
    for head in ("u_p", "u_a"):
        _add_conv(params, rng, f"{head}1", f1, e5)
        _add_bn(params, buffers, f"{head}1_bn", f1)
        _add_conv(params, rng, f"{head}2", f2, f1)
        _add_bn(params, buffers, f"{head}2_bn", f2)
        _add_conv(params, rng, f"{head}3", 1, f2)
    return params, buffers


def bind(params: dict, keys=None) -> dict[str, DiffValue]:
    """Fresh gradient-tracking leaves over (a subset of) the parameter arrays."""
    if keys is None:
        keys = params.keys()
    return {k: DiffValue(params[k], requires_grad=True) for k in keys}


GEN_KEYS_PREFIXES = ("g_", "i_")
UNC_KEYS_PREFIX = "u_"


def generator_keys(params: dict) -> list[str]:
    return [k for k in params if k.startswith(GEN_KEYS_PREFIXES)]


def uncertainty_keys(params: dict) -> list[str]:
    return [k for k in params if k.startswith(UNC_KEYS_PREFIX)]


# -- forward passes -----------------------------------------------------------


def _conv(p, name, x, stride=1):
    return dc.add(dc.conv2d(x, p[f"{name}_w"], stride=stride), p[f"{name}_b"])


def _act(x):
    return dc.leaky_relu(x, LRELU_SLOPE)


def dropout_site_shapes(h: int, w: int) -> list[tuple[int, int, int]]:
    """(channels, height, width) of each generator dropout site, in order."""
    w3 = GEN_ENC_WIDTHS[2]
    d1, d2, d3 = GEN_DEC_WIDTHS
    return [
        (w3, h // 8, w // 8),
        (d1, h // 4, w // 4),
        (d2, h // 2, w // 2),
        (d3, h, w),
    ]


def draw_dropout_masks(rng: np.random.Generator, h: int, w: int, rate: float) -> list[np.ndarray]:
    """One keep/drop mask per dropout site for a single sample."""
    return [
        (rng.random((1, c, sh, sw)) >= rate).astype(np.float64)
        for c, sh, sw in dropout_site_shapes(h, w)
    ]


def generator_forward(p, x, z, *, dropout_masks=None, dropout_rate: float) -> DiffValue:
    """Logits (N, 1, H, W) for inputs x (N, 3, H, W) and latents z (N, d).

    dropout_masks is a list of per-site masks for stochastic passes; None
    means deterministic evaluation, which rescales activations by the keep
    probability instead.
    """
    xv = x.value if isinstance(x, DiffValue) else np.asarray(x, dtype=np.float64)
    n, _, h, w = xv.shape
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ValueError(f"input size {h}x{w} not divisible by {DOWNSAMPLE_FACTOR}")

    def drop(t, site):
        if dropout_masks is None:
            return dc.mul(t, 1.0 - dropout_rate)
        return dc.apply_mask(t, dropout_masks[site])

    f1 = _act(_conv(p, "g_enc1", dc._lift(xv), stride=2))
    f2 = _act(_conv(p, "g_enc2", f1, stride=2))
    f3 = _act(_conv(p, "g_enc3", f2, stride=2))

    z = dc._lift(z)
    tiled = dc.mul(dc.reshape(z, (n, z.value.shape[1], 1, 1)), np.ones((1, 1, h // 8, w // 8)))
    fused = drop(_act(_conv(p, "g_fuse", dc.concat([f3, tiled], axis=1))), 0)

    u1 = drop(_act(_conv(p, "g_dec1", dc.upsample_nearest(fused))), 1)
    u2 = drop(_act(_conv(p, "g_dec2", dc.upsample_nearest(u1))), 2)
    u3 = drop(_act(_conv(p, "g_dec3", dc.upsample_nearest(u2))), 3)
    return _conv(p, "g_out", u3)


def inference_forward(p, x) -> tuple[DiffValue, DiffValue]:
    """Latent posterior (mu, log_sigma), each (N, d)."""
    f = _act(_conv(p, "i_c1", dc._lift(np.asarray(x, dtype=np.float64)), stride=2))
    f = _act(_conv(p, "i_c2", f, stride=2))
    f = _act(_conv(p, "i_c3", f, stride=2))
    f = _act(_conv(p, "i_c4", f))
    f = _act(_conv(p, "i_c5", f))
    pooled = dc.dmean(f, axis=(2, 3), keepdims=True)
    n = pooled.value.shape[0]
    mu = dc.reshape(_conv(p, "i_mu", pooled), (n, -1))
    log_sigma = dc.reshape(_conv(p, "i_ls", pooled), (n, -1))
    return mu, log_sigma


def _batch_norm(p, buffers, name, x, *, train: bool, update_running: bool) -> DiffValue:
    gamma = p[f"{name}_g"]
    beta = p[f"{name}_beta"]
    if train:
        mu = dc.dmean(x, axis=(0, 2, 3), keepdims=True)
        centered = dc.sub(x, mu)
        var = dc.dmean(dc.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        if update_running:
            buffers[f"{name}_rm"] = (1 - BN_MOMENTUM) * buffers[f"{name}_rm"] + BN_MOMENTUM * mu.value
            buffers[f"{name}_rv"] = (1 - BN_MOMENTUM) * buffers[f"{name}_rv"] + BN_MOMENTUM * var.value
        inv_std = dc.exp(dc.mul(dc.log(dc.add(var, BN_EPS)), -0.5))
        xhat = dc.mul(centered, inv_std)
    else:
        rm = buffers[f"{name}_rm"]
        rv = buffers[f"{name}_rv"]
        xhat = dc.mul(dc.sub(x, rm), 1.0 / np.sqrt(rv + BN_EPS))
    return dc.add(dc.mul(xhat, gamma), beta)


def uncertainty_forward(p, buffers, x, probs, *, train: bool, update_running: bool = True):
    """Non-negative (predictive, aleatoric) maps, each (N, 1, H, W).

    Input is the image concatenated with the prediction probabilities.
    Batch norm + LeakyReLU follow every layer except each head's final conv,
    which ends in softplus.
    """
    xv = np.asarray(x, dtype=np.float64)
    pv = probs.value if isinstance(probs, DiffValue) else np.asarray(probs, dtype=np.float64)
    if pv.ndim == 2:
        pv = pv[None, None]
    inp = np.concatenate([xv, pv], axis=1)

    def block(name, t, stride=1):
        t = _conv(p, name, t, stride=stride)
        t = _batch_norm(p, buffers, f"{name}_bn", t, train=train, update_running=update_running)
        return _act(t)

    f = block("u_e1", dc._lift(inp))
    f = block("u_e2", f, stride=2)
    f = block("u_e3", f)
    f = block("u_e4", f, stride=2)
    f = block("u_e5", f)

    heads = []
    for head in ("u_p", "u_a"):
        t = block(f"{head}1", dc.upsample_nearest(f))
        t = block(f"{head}2", dc.upsample_nearest(t))
        heads.append(dc.softplus(_conv(p, f"{head}3", t)))
    return heads[0], heads[1]


# -- model container and checkpoints -----------------------------------------


@dataclass
class SmokeModel:
    params: dict
    buffers: dict
    config: TrainConfig
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: TrainConfig) -> "SmokeModel":
        params, buffers = init_parameters(config.seed, config.latent_dim)
        return cls(params=params, buffers=buffers, config=config,
                   rng_state={"root_seed": config.seed, "steps_completed": 0})

    # spec-facing convenience wrappers ------------------------------------

    def sample_latent(self, image, rng: np.random.Generator):
        """Reparameterized draw z = mu + sigma * eps for one image."""
        x = _image_array(image)[None]
        leaves = bind(self.params, [k for k in self.params if k.startswith("i_")])
        mu, log_sigma = inference_forward(leaves, x)
        eps = rng.standard_normal(mu.value.shape)
        z = dc.add(mu, dc.mul(dc.exp(log_sigma), eps))
        return z, mu, log_sigma

    def forward_logits(self, image, z, stochastic: bool = False, seed: int | None = None) -> np.ndarray:
        """Single forward pass value; stochastic passes need a seed."""
        x = _image_array(image)[None]
        h, w = x.shape[2:]
        masks = None
        if stochastic:
            if seed is None:
                raise ValueError("stochastic forward needs a seed")
            rng = np.random.default_rng(derive_seed(seed, "dropout"))
            masks = draw_dropout_masks(rng, h, w, self.config.dropout)
        with dc.no_grad():
            out = generator_forward(
                bind(self.params), x, np.asarray(z, dtype=np.float64).reshape(1, -1),
                dropout_masks=masks, dropout_rate=self.config.dropout,
            )
        return out.value[0, 0]

    def save(self, path) -> None:
        save_checkpoint(self, path)


def _image_array(image) -> np.ndarray:
    """(3, H, W) float64 from an ImageRGB or an array in CHW or HWC layout."""
    if isinstance(image, ImageRGB):
        return image.to_array().transpose(2, 0, 1)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return arr
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr.transpose(2, 0, 1)
    raise ValueError(f"cannot interpret image with shape {arr.shape}")


def save_checkpoint(model: SmokeModel, path) -> None:
    """Versioned container: text header (shapes + config), then little-endian
    float32 payload holding params and buffers in header order."""
    param_names = sorted(model.params)
    buffer_names = sorted(model.buffers)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.as_dict(),
        "rng_state": model.rng_state,
        "params": [[k, list(model.params[k].shape)] for k in param_names],
        "buffers": [[k, list(model.buffers[k].shape)] for k in buffer_names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(
        np.ascontiguousarray(model.params[k], dtype="<f4").tobytes() for k in param_names
    ) + b"".join(
        np.ascontiguousarray(model.buffers[k], dtype="<f4").tobytes() for k in buffer_names
    )
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b" v%d\n" % CHECKPOINT_VERSION)
        f.write(b"%d\n" % len(header_bytes))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path) -> SmokeModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise InvalidCheckpointError(f"cannot read checkpoint: {e}") from e
    magic_line, _, rest = blob.partition(b"\n")
    if not magic_line.startswith(CHECKPOINT_MAGIC):
        raise InvalidCheckpointError("not a smokelens checkpoint")
    if magic_line != CHECKPOINT_MAGIC + b" v%d" % CHECKPOINT_VERSION:
        raise InvalidCheckpointError(f"unsupported checkpoint version: {magic_line!r}")
    length_line, _, rest = rest.partition(b"\n")
    try:
        header_len = int(length_line)
        header = json.loads(rest[:header_len])
    except (ValueError, json.JSONDecodeError) as e:
        raise InvalidCheckpointError(f"corrupt checkpoint header: {e}") from e
    payload = rest[header_len:]

    def unpack(entries, offset):
        out = {}
        for name, shape in entries:
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(payload):
                raise InvalidCheckpointError("checkpoint payload truncated")
            out[name] = np.frombuffer(payload[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
            offset = end
        return out, offset

    params, offset = unpack(header["params"], 0)
    buffers, offset = unpack(header["buffers"], offset)
    if offset != len(payload):
        raise InvalidCheckpointError("checkpoint payload has trailing bytes")
    return SmokeModel(
        params=params,
        buffers=buffers,
        config=TrainConfig.from_dict(header["config"]),
        rng_state=header.get("rng_state", {}),
    )


# -- prediction and sampling ---------------------------------------------------


@dataclass(frozen=True)
class PredictOutput:
    probability: GrayMap
    predictive: GrayMap
    aleatoric: GrayMap


def predict(model: SmokeModel, image) -> PredictOutput:
    """Deterministic prediction plus sampling-free uncertainty maps.

    Uses z = mu, dropout rescaling instead of sampling, and the head's
    running batch-norm statistics, so the output is seed-independent.
    """
    x = _image_array(image)[None]
    with dc.no_grad():
        leaves = bind(model.params)
        mu, _ = inference_forward(leaves, x)
        logits = generator_forward(
            leaves, x, mu, dropout_masks=None, dropout_rate=model.config.dropout
        )
        prob = dc.sigmoid(logits)
        up, ua = uncertainty_forward(
            leaves, model.buffers, x, prob, train=False, update_running=False
        )
    return PredictOutput(
        probability=GrayMap(prob.value[0, 0]),
        predictive=GrayMap(up.value[0, 0]),
        aleatoric=GrayMap(ua.value[0, 0]),
    )


def mc_sample(
    model: SmokeModel,
    image,
    b: int,
    seed: int,
    *,
    sample_z: bool = True,
    use_dropout: bool = True,
) -> SampleSet:
    """B stochastic probability maps; per-sample seeds derive from `seed`.

    Each sample jointly redraws the latent and every dropout mask. Disabling
    both collapses the set to B identical deterministic passes.
    """
    if b < 1:
        raise ValueError(f"need at least one sample, got {b}")
    x = _image_array(image)[None]
    h, w = x.shape[2], x.shape[3]
    with dc.no_grad():
        leaves = bind(model.params)
        mu, ls = inference_forward(leaves, x)
        mu_v, sigma_v = mu.value, np.exp(ls.value)

        zs = []
        site_masks: list[list[np.ndarray]] = [[] for _ in dropout_site_shapes(h, w)]
        for i in range(b):
            rng = np.random.default_rng(derive_seed(seed, "mc-sample", i))
            eps = rng.standard_normal(mu_v.shape[1])
            zs.append(mu_v[0] + sigma_v[0] * eps if sample_z else mu_v[0])
            masks = draw_dropout_masks(rng, h, w, model.config.dropout if use_dropout else 0.0)
            for site, m in enumerate(masks):
                site_masks[site].append(m)

        batch_x = np.repeat(x, b, axis=0)
        batch_z = np.stack(zs)
        masks = [np.concatenate(ms, axis=0) for ms in site_masks] if use_dropout else None
        logits = generator_forward(
            bind(model.params), batch_x, batch_z,
            dropout_masks=masks, dropout_rate=model.config.dropout,
        )
        probs = dc.sigmoid(logits).value[:, 0]
    return SampleSet(probs)


# -- optimizer and training ----------------------------------------------------


class Adam:
    """Per-array Adam with bias correction; state keyed like the params."""

    def __init__(self, keys, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.keys = list(keys)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k in self.keys:
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k] = m
            self.v[k] = v
            params[k] -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


@dataclass
class TrainResult:
    model: SmokeModel
    loss_trace: list[float]


def _prepare_scene(scene: LabeledScene, need_transmission: bool, coherence_cfg: CoherenceConfig):
    x = _image_array(scene.image)
    y = scene.mask.data
    weights = None
    if need_transmission:
        t = estimate_transmission(scene.image, TransmissionConfig.for_size(*y.shape))
        offsets, w = L.bilateral_weights(t.data, coherence_cfg)
        weights = (t.data, offsets, w)
    return x, y, weights


def train(dataset: list[LabeledScene], config: TrainConfig) -> TrainResult:
    """Train on labeled scenes; see the module docstring for the two-phase step."""
    if not dataset:
        raise ValueError("empty training dataset")
    shapes = {scene.mask.shape for scene in dataset}
    if len(shapes) != 1:
        raise ValueError(f"all scenes must share one size, got {shapes}")
    h, w = next(iter(shapes))
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ValueError(f"scene size {h}x{w} not divisible by {DOWNSAMPLE_FACTOR}")

    model = SmokeModel.initialize(config)
    coh_cfg = config.coherence_config()
    weights_cfg = LossWeights(lambda1=config.lambda1, lambda2=config.lambda2)
    pool_k = config.pool_k if config.pool_k else L.default_pool_k(h, w)
    need_t = config.lambda1 > 0
    prepared = [_prepare_scene(s, need_t, coh_cfg) for s in dataset]

    gen_keys = generator_keys(model.params)
    unc_keys = uncertainty_keys(model.params)
    opt_gen = Adam(gen_keys, lr=config.lr_gen * config.lr_scale)
    opt_unc = Adam(unc_keys, lr=config.lr_unc * config.lr_scale)

    trace: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        decay = config.lr_decay if epoch >= config.lr_decay_epoch else 1.0
        opt_gen.lr = config.lr_gen * config.lr_scale * decay
        opt_unc.lr = config.lr_unc * config.lr_scale * decay

        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(len(prepared))
        for start in range(0, len(prepared), config.batch_size):
            batch = [prepared[i] for i in order[start : start + config.batch_size]]
            rng = np.random.default_rng(derive_seed(config.seed, "train-step", step))

            # (a) generator + inference update on the weighted total loss.
            leaves = bind(model.params, gen_keys)
            batch_loss = DiffValue(0.0)
            for x, y, tw in batch:
                mu, ls = inference_forward(leaves, x[None])
                eps = rng.standard_normal((1, config.latent_dim))
                z = dc.add(mu, dc.mul(dc.exp(ls), eps))
                masks = draw_dropout_masks(rng, h, w, config.dropout)
                logits4 = generator_forward(
                    leaves, x[None], z, dropout_masks=masks, dropout_rate=config.dropout
                )
                s = dc.reshape(logits4, (h, w))
                base = dc.add(
                    L.structure_loss(s, y, pool_k),
                    L.kl_standard_normal(dc.reshape(mu, (-1,)), dc.reshape(ls, (-1,))),
                )
                if need_t:
                    t_map, offsets, bw = tw
                    coh = L.transmission_coherence_loss(
                        dc.sigmoid(s), t_map, coh_cfg, precomputed=(offsets, bw)
                    )
                else:
                    coh = DiffValue(0.0)
                if config.lambda2 > 0:
                    if config.entropy_mode == "plain":
                        ent = L.plain_entropy_loss(s)
                    else:
                        with dc.no_grad():
                            up_hat, _ = uncertainty_forward(
                                bind(model.params, unc_keys), model.buffers,
                                x[None], dc.sigmoid(s).value,
                                train=True, update_running=False,
                            )
                        ent = L.calibrated_entropy_loss(s, up_hat.value[0, 0])
                else:
                    ent = DiffValue(0.0)
                batch_loss = dc.add(batch_loss, L.total_generator_loss(base, coh, ent, weights_cfg))
            batch_loss = dc.mul(batch_loss, 1.0 / len(batch))
            dc.backward(batch_loss)
            opt_gen.step(model.params, {k: dc.grad_of(leaves[k]) for k in gen_keys})
            trace.append(float(batch_loss.value))

            # (b) uncertainty-head update against fresh MC targets.
            unc_leaves = bind(model.params, unc_keys)
            unc_loss = DiffValue(0.0)
            for x, y, tw in batch:
                samples = mc_sample(
                    model, x, config.mc_samples, derive_seed(config.seed, "mc-step", step)
                )
                maps = decompose(samples)
                mean_p = mean_prediction(samples).data
                up_hat, ua_hat = uncertainty_forward(
                    unc_leaves, model.buffers, x[None], mean_p, train=True, update_running=True
                )
                unc_loss = dc.add(
                    unc_loss,
                    L.uncertainty_consistency_loss(
                        maps.predictive.data, maps.aleatoric.data,
                        dc.reshape(up_hat, (h, w)), dc.reshape(ua_hat, (h, w)),
                    ),
                )
            unc_loss = dc.mul(unc_loss, 1.0 / len(batch))
            dc.backward(unc_loss)
            opt_unc.step(model.params, {k: dc.grad_of(unc_leaves[k]) for k in unc_keys})

            step += 1

    model.rng_state = {"root_seed": config.seed, "steps_completed": step}
    return TrainResult(model=model, loss_trace=trace)
