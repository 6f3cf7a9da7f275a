"""The denoising transformer and its conditioning adapters.

Input is the channel-concatenated (noisy latent, condition, mask) triple,
patchified to tokens. Pose conditioning is spatially aligned: projected pose
latents are added to the tokens of every window position, never to the
reference latent's tokens. Expression conditioning enters through face blocks
inserted after every k-th transformer block; their cross-attention is masked
so the tokens of latent step t see exactly the face latent of step t (the
reference step sees a learned null latent instead). Face-block gates and the
low-rank adapter's up-projections start at zero, so each new pathway begins
as the identity over whatever the previous training stage produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as pt
from .face import DOWN_WIDTH, N_COEFF, FaceEncoder, MotionBasis, TemporalDownsampler
from .packs import ConditionPack
from .tensor import AlignmentError, ConfigError, ShapeError, Tensor
from .vae import ToyVAE

TIME_FREQ_DIM = 64


@dataclass
class DiTConfig:
    n_layers: int = 8
    dim: int = 128
    n_heads: int = 4
    face_stride: int = 2  # face block after every k-th layer
    patch: tuple = (1, 2, 2)
    lora_rank: int = 8
    lora_alpha: float = 16.0
    latent_channels: int = 4
    latent_size: int = 16  # spatial side of the latent grid
    max_latents: int = 24  # positional table length
    face_width: int = DOWN_WIDTH
    face_coeff: int = N_COEFF
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.n_layers % self.face_stride:
            raise ConfigError(
                f"n_layers {self.n_layers} not divisible by face stride {self.face_stride}"
            )
        if self.lora_rank >= self.dim:
            raise ConfigError(f"lora rank {self.lora_rank} must be below model dim {self.dim}")

    @property
    def face_block_count(self) -> int:
        return self.n_layers // self.face_stride

    @property
    def tokens_per_step(self) -> int:
        return (self.latent_size // self.patch[1]) * (self.latent_size // self.patch[2])

    @property
    def token_dim(self) -> int:
        pt_, ph, pw = self.patch
        return (2 * self.latent_channels + 1) * pt_ * ph * pw

    @property
    def out_dim(self) -> int:
        pt_, ph, pw = self.patch
        return self.latent_channels * pt_ * ph * pw


def timestep_embedding(t: float, dim: int = TIME_FREQ_DIM, dtype=np.float32) -> Tensor:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return Tensor(np.concatenate([np.cos(ang), np.sin(ang)]).astype(dtype))


def _init(rng, shape, scale, dtype):
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class LoRAAdapter:
    """Low-rank residual weights on the attention projections.

    Storage matches the x @ W convention: `down` [D_in, r], `up` [r, D_out]
    with `up` zero-initialized, so a fresh adapter is exactly a no-op.
    """

    def __init__(self, rng, targets: dict, rank: int, alpha: float, dtype=np.float32):
        self.rank = rank
        self.scale = alpha / rank
        self.params = {}
        for name, (d_in, d_out) in targets.items():
            if rank >= min(d_in, d_out):
                raise ConfigError(f"lora rank {rank} must be below layer dims ({d_in}, {d_out})")
            self.params[f"{name}.down"] = _init(rng, (d_in, rank), 1.0 / np.sqrt(d_in), dtype)
            self.params[f"{name}.up"] = _zeros((rank, d_out), dtype)

    def targets(self):
        return sorted({k.rsplit(".", 1)[0] for k in self.params})


def lora_forward(x: Tensor, w: Tensor, adapter: LoRAAdapter | None, name: str) -> Tensor:
    """x @ W plus the adapter's low-rank residual when it targets this layer."""
    y = pt.matmul(x, w)
    if adapter is not None and f"{name}.down" in adapter.params:
        delta = pt.matmul(pt.matmul(x, adapter.params[f"{name}.down"]), adapter.params[f"{name}.up"])
        y = pt.add(y, pt.scale(delta, adapter.scale))
    return y


def _const_ln(x: Tensor, dim: int) -> Tensor:
    # normalization without learned affine; modulation supplies scale/shift
    dt = x.data.dtype
    return pt.layer_norm(x, Tensor(np.ones(dim, dt)), Tensor(np.zeros(dim, dt)))


class FaceBlock:
    """Temporally confined cross-attention from video tokens to face latents.

    One face latent per latent step plus a trailing null key; the mask routes
    every token to its own step's key only, which makes the confinement exact
    (the single allowed key takes softmax weight 1.0). The output enters
    through a zero-initialized gate.
    """

    def __init__(self, rng, cfg: DiTConfig, dtype=np.float32):
        d, fw = cfg.dim, cfg.face_width
        self.dim = d
        self.params = {
            "q": _init(rng, (d, d), 0.02, dtype),
            "k": _init(rng, (fw, d), 1.0 / np.sqrt(fw), dtype),
            "v": _init(rng, (fw, d), 1.0 / np.sqrt(fw), dtype),
            "o": _init(rng, (d, d), 0.02, dtype),
            "gate": _zeros((d,), dtype),
        }

    def __call__(
        self,
        tokens: Tensor,
        face: Tensor | None,
        step_of_token: np.ndarray,
        n_window: int,
        adapter: LoRAAdapter | None = None,
        name: str = "face",
        force_null: bool = False,
    ) -> Tensor:
        if face is not None and face.shape[0] != n_window:
            raise AlignmentError(
                f"face latents cover {face.shape[0]} steps, window has {n_window}"
            )
        # keys: per-step face latents then the null latent (key index n_window)
        null = pt.reshape(self.null_latent, (1, self.null_latent.shape[0]))
        if face is None or force_null:
            kv_src = pt.tile_rows(null, n_window + 1)
        else:
            kv_src = pt.concat([face, null], axis=0)
        q = lora_forward(_const_ln(tokens, self.dim), self.params["q"], adapter, f"{name}.q")
        k = lora_forward(kv_src, self.params["k"], adapter, f"{name}.k")
        v = lora_forward(kv_src, self.params["v"], adapter, f"{name}.v")
        key_of_token = np.where(step_of_token == 0, n_window, step_of_token - 1)
        mask = np.zeros((tokens.shape[0], n_window + 1), dtype=bool)
        mask[np.arange(tokens.shape[0]), key_of_token] = True
        att = pt.attention(q, k, v, mask)
        out = lora_forward(att, self.params["o"], adapter, f"{name}.o")
        return pt.add(tokens, pt.mul(out, self.params["gate"]))


class AnimationModel:
    """Everything the denoiser needs: autoencoder, backbone, adapters.

    Parameters are reachable through `named_params(roles)`; role is one of
    base / face / lora and drives the stage freeze contracts.
    """

    def __init__(self, cfg: DiTConfig, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.dtype = dtype
        self.vae = ToyVAE(rng, dtype)
        self.face_encoder = FaceEncoder(rng, cfg.face_coeff, dtype)
        self.basis = MotionBasis(rng, cfg.face_coeff, dtype)
        self.downsampler = TemporalDownsampler(rng, cfg.face_coeff, cfg.face_width, dtype)
        d = cfg.dim
        p = {}
        p["input.w"] = _init(rng, (cfg.token_dim, d), 1.0 / np.sqrt(cfg.token_dim), dtype)
        p["input.b"] = _zeros((d,), dtype)
        p["body.w"] = _zeros((cfg.out_dim, d), dtype)  # pose injection starts silent
        p["pos.temporal"] = _init(rng, (cfg.max_latents, d), 0.02, dtype)
        p["pos.spatial"] = _init(rng, (cfg.tokens_per_step, d), 0.02, dtype)
        p["time.w1"] = _init(rng, (TIME_FREQ_DIM, d), 1.0 / np.sqrt(TIME_FREQ_DIM), dtype)
        p["time.b1"] = _zeros((d,), dtype)
        p["time.w2"] = _init(rng, (d, d), 1.0 / np.sqrt(d), dtype)
        p["time.b2"] = _zeros((d,), dtype)
        hidden = cfg.mlp_ratio * d
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            for proj in ("q", "k", "v", "o"):
                p[f"{pre}.attn.{proj}"] = _init(rng, (d, d), 0.02, dtype)
            p[f"{pre}.mlp.w1"] = _init(rng, (d, hidden), np.sqrt(2.0 / d), dtype)
            p[f"{pre}.mlp.b1"] = _zeros((hidden,), dtype)
            p[f"{pre}.mlp.w2"] = _init(rng, (hidden, d), np.sqrt(2.0 / hidden), dtype)
            p[f"{pre}.mlp.b2"] = _zeros((d,), dtype)
            p[f"{pre}.ada.w"] = _zeros((d, 6 * d), dtype)  # adaLN-zero
            p[f"{pre}.ada.b"] = _zeros((6 * d,), dtype)
        p["final.ada.w"] = _zeros((d, 2 * d), dtype)
        p["final.ada.b"] = _zeros((2 * d,), dtype)
        p["final.w"] = _zeros((d, cfg.out_dim), dtype)  # zero-init output head
        p["final.b"] = _zeros((cfg.out_dim,), dtype)
        p["null_face"] = _init(rng, (cfg.face_width,), 0.02, dtype)
        self.params = p
        self.face_blocks = []
        for j in range(cfg.face_block_count):
            fb = FaceBlock(rng, cfg, dtype)
            fb.null_latent = p["null_face"]
            self.face_blocks.append(fb)
        self.lora: LoRAAdapter | None = None

    # -- parameter bookkeeping -------------------------------------------------

    def attach_lora(self, rng=None) -> LoRAAdapter:
        """Create (or replace) the relighting adapter over all attention layers."""
        rng = rng or np.random.default_rng(0)
        d = self.cfg.dim
        targets = {}
        for i in range(self.cfg.n_layers):
            for proj in ("q", "k", "v", "o"):
                targets[f"blocks.{i}.attn.{proj}"] = (d, d)
        for j in range(self.cfg.face_block_count):
            targets[f"face_blocks.{j}.q"] = (d, d)
            targets[f"face_blocks.{j}.k"] = (self.cfg.face_width, d)
            targets[f"face_blocks.{j}.v"] = (self.cfg.face_width, d)
            targets[f"face_blocks.{j}.o"] = (d, d)
        self.lora = LoRAAdapter(rng, targets, self.cfg.lora_rank, self.cfg.lora_alpha, self.dtype)
        return self.lora

    def named_params(self, roles=None) -> dict:
        out = {}
        for name, t in self.vae.params.items():
            out[f"vae.{name}"] = t
        for name, t in self.params.items():
            out[f"dit.{name}"] = t
        for j, fb in enumerate(self.face_blocks):
            for name, t in fb.params.items():
                out[f"face_blocks.{j}.{name}"] = t
        for name, t in self.face_encoder.params.items():
            out[f"face_enc.{name}"] = t
        out["face_basis.raw"] = self.basis.raw
        for name, t in self.downsampler.params.items():
            out[f"face_down.{name}"] = t
        if self.lora is not None:
            for name, t in self.lora.params.items():
                out[f"lora.{name}"] = t
        if roles is not None:
            out = {k: v for k, v in out.items() if self.role_of(k) in roles}
        return out

    @staticmethod
    def role_of(name: str) -> str:
        if name.startswith("lora."):
            return "lora"
        if name.startswith(("face_", "dit.null_face")):
            return "face"
        if name.startswith("vae."):
            return "vae"
        return "base"

    # -- forward ----------------------------------------------------------------

    def _time_features(self, t: float) -> Tensor:
        e = pt.reshape(timestep_embedding(t, dtype=self.dtype), (1, TIME_FREQ_DIM))
        h = pt.silu(pt.linear(e, self.params["time.w1"], self.params["time.b1"]))
        return pt.silu(pt.linear(h, self.params["time.w2"], self.params["time.b2"]))  # [1, D]

    def _modulation(self, tfeat: Tensor, prefix: str, n_chunks: int):
        raw = pt.linear(tfeat, self.params[f"{prefix}.w"], self.params[f"{prefix}.b"])
        d = self.cfg.dim
        return [pt.reshape(pt.slice_axis(raw, 1, i * d, (i + 1) * d), (d,)) for i in range(n_chunks)]

    def _self_attention(self, x: Tensor, layer: int, adapter) -> Tensor:
        cfg = self.cfg
        d, heads = cfg.dim, cfg.n_heads
        dh = d // heads
        L = x.shape[0]
        pre = f"blocks.{layer}.attn"
        q = lora_forward(x, self.params[f"{pre}.q"], adapter, f"{pre}.q")
        k = lora_forward(x, self.params[f"{pre}.k"], adapter, f"{pre}.k")
        v = lora_forward(x, self.params[f"{pre}.v"], adapter, f"{pre}.v")

        def heads_first(t):
            return pt.transpose(pt.reshape(t, (L, heads, dh)), (1, 0, 2))  # [H, L, dh]

        qh, kh, vh = heads_first(q), heads_first(k), heads_first(v)
        logits = pt.scale(pt.matmul(qh, pt.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
        att = pt.matmul(pt.softmax(logits, axis=-1), vh)  # [H, L, dh]
        merged = pt.reshape(pt.transpose(att, (1, 0, 2)), (L, d))
        return lora_forward(merged, self.params[f"{pre}.o"], adapter, f"{pre}.o")

    def forward_tokens(
        self,
        x_t: Tensor,
        pack: ConditionPack,
        pose_latents: Tensor | None,
        face_down: Tensor | None,
        t: float,
        use_lora: bool = True,
        force_null_face: bool = False,
    ) -> Tensor:
        """Velocity prediction [C_z, T_total, h, w] for the current noisy latent."""
        cfg = self.cfg
        if x_t.shape != pack.condition.shape:
            raise ShapeError(f"x_t {x_t.shape} does not match pack {pack.condition.shape}")
        adapter = self.lora if (use_lora and self.lora is not None) else None
        n_total = pack.n_total
        n_window = n_total - 1
        tps = cfg.tokens_per_step

        stacked = pt.concat([x_t, pack.condition, pack.mask], axis=0)
        tokens = pt.linear(pt.patchify(stacked, cfg.patch), self.params["input.w"], self.params["input.b"])
        pos_t = pt.slice_axis(self.params["pos.temporal"], 0, 0, n_total)
        tokens = pt.add(tokens, pt.repeat_rows(pos_t, tps))
        tokens = pt.add(tokens, pt.tile_rows(self.params["pos.spatial"], n_total))

        if pose_latents is not None:
            if pose_latents.shape[1] != n_window:
                raise AlignmentError(
                    f"pose latents cover {pose_latents.shape[1]} steps, window has {n_window}"
                )
            pose_tokens = pt.matmul(pt.patchify(pose_latents, cfg.patch), self.params["body.w"])
            ref_tokens = pt.slice_axis(tokens, 0, 0, tps)
            win_tokens = pt.add(pt.slice_axis(tokens, 0, tps, tokens.shape[0]), pose_tokens)
            tokens = pt.concat([ref_tokens, win_tokens], axis=0)

        step_of_token = np.repeat(np.arange(n_total), tps)
        tfeat = self._time_features(t)
        x = tokens
        face_idx = 0
        for i in range(cfg.n_layers):
            sh1, sc1, g1, sh2, sc2, g2 = self._modulation(tfeat, f"blocks.{i}.ada", 6)
            h = pt.modulate(_const_ln(x, cfg.dim), sh1, sc1)
            x = pt.add(x, pt.mul(self._self_attention(h, i, adapter), g1))
            h = pt.modulate(_const_ln(x, cfg.dim), sh2, sc2)
            h = pt.linear(pt.gelu(pt.linear(h, self.params[f"blocks.{i}.mlp.w1"], self.params[f"blocks.{i}.mlp.b1"])),
                          self.params[f"blocks.{i}.mlp.w2"], self.params[f"blocks.{i}.mlp.b2"])
            x = pt.add(x, pt.mul(h, g2))
            if (i + 1) % cfg.face_stride == 0:
                x = self.face_blocks[face_idx](
                    x, face_down, step_of_token, n_window, adapter,
                    f"face_blocks.{face_idx}", force_null_face,
                )
                face_idx += 1

        sh, sc = self._modulation(tfeat, "final.ada", 2)
        x = pt.modulate(_const_ln(x, cfg.dim), sh, sc)
        x = pt.linear(x, self.params["final.w"], self.params["final.b"])
        dims = (cfg.latent_channels,) + tuple(pack.condition.shape[1:])
        return pt.unpatchify(x, dims, cfg.patch)


def body_adapter_inject(
    pose_frames: Tensor, noise_tokens: Tensor, pack: ConditionPack, vae: ToyVAE, proj_w: Tensor,
    patch=(1, 2, 2),
) -> Tensor:
    """Add projected, patchified pose latents to the window tokens.

    Pose frames cover exactly the window (temporal guidance included); the
    reference latent's tokens pass through untouched.
    """
    pose_lat = vae.encode_tensor(pose_frames)
    n_window = pack.n_total - 1
    if pose_lat.shape[1] != n_window:
        raise AlignmentError(f"pose latents cover {pose_lat.shape[1]} steps, window has {n_window}")
    pose_tokens = pt.matmul(pt.patchify(pose_lat, patch), proj_w)
    tps = noise_tokens.shape[0] // pack.n_total
    ref = pt.slice_axis(noise_tokens, 0, 0, tps)
    win = pt.add(pt.slice_axis(noise_tokens, 0, tps, noise_tokens.shape[0]), pose_tokens)
    return pt.concat([ref, win], axis=0)
