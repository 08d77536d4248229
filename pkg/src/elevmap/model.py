"""The elevation prediction network.

Pipeline per frame: the three camera images pass through a shared
convolutional backbone producing features at strides 8/16/32. Each
feature token is paired with a positional embedding computed by a small
MLP from its unprojected ray direction in the gravity-aligned vehicle
frame (camera-only directions when ``use_ope`` is off). A learnable
map-view query grid, optionally augmented with channels encoding the
ego-aligned, overlap-masked previous prediction, cross-attends to the
concatenated front/left/right tokens per scale: keys are projections of
[positional; visual] tokens, values projections of the visual tokens.
Per-scale outputs are projected to a common width, bilinearly upsampled
by 4/8/16, summed and passed through a small convolutional head. The
head subtracts the anchor-cell value, so the output is exactly zero at
the vehicle cell.

Parameters are float64 and individually seeded by name, so two configs
sharing a parameter initialize it identically regardless of which other
parameters exist.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraRig, feature_grid_pixels, unproject_directions
from .config import RunConfig
from .errors import ConfigurationError
from .mapspace import ElevationMap, GridSpec, VehiclePose, align_previous, masked_history

__all__ = ["ElevationNet", "pool_masked_history"]

QUERY_FACTORS = (4, 8, 16)


def pool_masked_history(masked: np.ndarray, mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Mask-weighted block mean of a masked history map onto the query grid.

    Blocks with no valid cell pool to 0, matching the zero history used
    when no previous prediction exists.
    """
    masked = np.asarray(masked, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = masked.shape
    oh, ow = out_hw
    out = np.zeros((oh, ow))
    for i in range(oh):
        rs, re = math.floor(i * h / oh), math.ceil((i + 1) * h / oh)
        for j in range(ow):
            cs, ce = math.floor(j * w / ow), math.ceil((j + 1) * w / ow)
            n = mask[rs:re, cs:ce].sum()
            if n > 0:
                out[i, j] = masked[rs:re, cs:ce].sum() / n
    return out


class ElevationNet:
    """Multi-view cross-attention elevation regressor. See module docstring."""

    def __init__(self, config: RunConfig, rig: CameraRig):
        self.config = config
        self.rig = rig
        self.grid = GridSpec(config.grid_rows, config.grid_cols, config.resolution_m)

        s = config.image_size
        for intr, _ in rig:
            if intr.image_width != s or intr.image_height != s:
                raise ConfigurationError(
                    f"rig image size {intr.image_width}x{intr.image_height} "
                    f"does not match configured {s}"
                )

        # stride-2 conv chain; taps after stages 2, 3, 4
        dims = []
        d = s
        for _ in range(5):
            d = (d - 1) // 2 + 1
            dims.append(d)
        self.scale_dims = [(dims[2], dims[2]), (dims[3], dims[3]), (dims[4], dims[4])]
        for h, _ in self.scale_dims:
            if s % h != 0:
                raise ConfigurationError(
                    f"image size {s} produces a {h}-wide feature map that does not "
                    f"divide the image evenly; use a power-of-two size >= 16"
                )

        rows, cols = self.grid.rows, self.grid.cols
        self.query_grids = [
            (-(-rows // f), -(-cols // f)) for f in QUERY_FACTORS
        ]

        # pixel centers of every feature cell, per scale per camera
        self._scale_pixels = [
            [feature_grid_pixels(intr, h, w) for intr, _ in rig]
            for (h, w) in self.scale_dims
        ]

        self.params: dict[str, Tensor] = {}
        self._build_params()

    # -- parameters ----------------------------------------------------------

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.config.param_seed, zlib.crc32(name.encode())])

    def _conv_param(self, name: str, c_out: int, c_in: int, k: int, bias: bool = True):
        fan_in = c_in * k * k
        w = self._rng(name + ".w").normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, k, k))
        self.params[name + ".w"] = Tensor(w, requires_grad=True)
        if bias:
            self.params[name + ".b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def _linear_param(self, name: str, d_in: int, d_out: int):
        w = self._rng(name + ".w").normal(0.0, math.sqrt(2.0 / d_in), (d_in, d_out))
        self.params[name + ".w"] = Tensor(w, requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(d_out), requires_grad=True)

    def _norm_param(self, name: str, d: int):
        self.params[name + ".g"] = Tensor(np.ones(d), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(d), requires_grad=True)

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _channel_norm(self, name: str, x: Tensor) -> Tensor:
        """LayerNorm over the channel axis of an (n, c, h, w) map."""
        t = x.transpose((0, 2, 3, 1))
        t = self._norm(name, t)
        return t.transpose((0, 3, 1, 2))

    _BACKBONE_STAGES = ("stem0", "stem1", "stem2", "tap0", "down1", "tap1", "down2", "tap2")

    def _build_params(self):
        cfg = self.config
        w0, w1, w2, w3, w4 = cfg.backbone_widths
        stage_io = {
            "stem0": (3, w0), "stem1": (w0, w1), "stem2": (w1, w2), "tap0": (w2, w2),
            "down1": (w2, w3), "tap1": (w3, w3), "down2": (w3, w4), "tap2": (w4, w4),
        }
        # channel norm after every stage keeps activations O(1) at any depth;
        # without it the stride-2 stack saturates SiLU mid-training and dies
        for stage in self._BACKBONE_STAGES:
            c_in, c_out = stage_io[stage]
            self._conv_param(f"backbone.{stage}", c_out, c_in, 3)
            self._norm_param(f"backbone.{stage}.ln", c_out)
        self._feat_channels = (w2, w3, w4)

        for k, d in enumerate(cfg.proj_dims):
            self._linear_param(f"ope.s{k}.fc0", 3, d)
            self._linear_param(f"ope.s{k}.fc1", d, d)

        qh0, qw0 = self.query_grids[0]
        q = self._rng("query.embed").normal(0.0, 1.0, (cfg.query_channels, qh0, qw0))
        self.params["query.embed"] = Tensor(q, requires_grad=True)

        if cfg.use_history:
            h0, h1 = cfg.history_widths
            self._conv_param("history.conv0", h0, 1, 1)
            self._conv_param("history.conv1", h1, h0, 1)
            q_in = cfg.query_channels + h1
        else:
            q_in = cfg.query_channels

        for k, d in enumerate(cfg.proj_dims):
            ch = self._feat_channels[k]
            # normalize the unbounded token streams entering attention: visual
            # tokens (deep conv stack) and queries (raw-meter history channels)
            self._norm_param(f"attn.s{k}.ln_phi", ch)
            self._norm_param(f"attn.s{k}.ln_q", q_in)
            self._linear_param(f"attn.s{k}.wq", q_in, d)
            self._linear_param(f"attn.s{k}.wk", d + ch, d)
            self._linear_param(f"attn.s{k}.wv", ch, d)
            self._linear_param(f"decoder.s{k}.proj", d, cfg.decoder_width)

        self._norm_param("decoder.ln", cfg.decoder_width)
        self._conv_param("head.conv0", cfg.decoder_width, cfg.decoder_width, 3)
        # no bias on the last conv: the anchor subtraction would cancel it exactly
        self._conv_param("head.conv1", 1, cfg.decoder_width, 1, bias=False)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ConfigurationError(
                f"checkpoint parameter names do not match model (missing={sorted(missing)}, "
                f"unexpected={sorted(extra)})"
            )
        for k, v in state.items():
            if v.shape != self.params[k].data.shape:
                raise ConfigurationError(
                    f"checkpoint shape {v.shape} != model shape {self.params[k].data.shape} for {k}"
                )
            self.params[k].data = np.asarray(v, dtype=np.float64).copy()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward pieces ------------------------------------------------------

    def _conv(self, name: str, x: Tensor, stride: int, pad: int = 1, act: bool = True) -> Tensor:
        out = ad.conv2d(
            x, self.params[name + ".w"], self.params.get(name + ".b"), stride=stride, pad=pad
        )
        return ad.silu(out) if act else out

    def _stage(self, stage: str, x: Tensor, stride: int) -> Tensor:
        x = self._conv(f"backbone.{stage}", x, stride)
        return self._channel_norm(f"backbone.{stage}.ln", x)

    def backbone_forward(self, images) -> list[Tensor]:
        """Images (n, 3, S, S) in [-0.5, 0.5] -> per-scale features (n, ch, h, w)."""
        x = ad.as_tensor(images)
        s = self.config.image_size
        if x.shape[1:] != (3, s, s):
            raise ConfigurationError(f"backbone expects (n, 3, {s}, {s}), got {x.shape}")
        x = self._stage("stem0", x, 2)
        x = self._stage("stem1", x, 2)
        x = self._stage("stem2", x, 2)
        f0 = self._stage("tap0", x, 1)
        f1 = self._stage("tap1", self._stage("down1", f0, 2), 1)
        f2 = self._stage("tap2", self._stage("down2", f1, 2), 1)
        return [f0, f1, f2]

    def ray_directions(self, gravity: np.ndarray, scale: int) -> np.ndarray:
        """Unit ray directions for all tokens of one scale, front/left/right order."""
        parts = [
            unproject_directions(cam, gravity, pix)
            for cam, pix in zip(self.rig, self._scale_pixels[scale])
        ]
        return np.concatenate(parts, axis=0)

    def ope_embed(self, gravity: np.ndarray) -> list[Tensor]:
        """Per-scale positional embeddings, one token per flattened feature cell."""
        out = []
        for k in range(3):
            dirs = Tensor(self.ray_directions(gravity, k))
            h = ad.silu(ad.matmul(dirs, self.params[f"ope.s{k}.fc0.w"]) + self.params[f"ope.s{k}.fc0.b"])
            out.append(ad.matmul(h, self.params[f"ope.s{k}.fc1.w"]) + self.params[f"ope.s{k}.fc1.b"])
        return out

    def encode_history(self, hist_qgrid) -> Tensor:
        """Two pointwise convs (widths per config) over the pooled masked history."""
        qh0, qw0 = self.query_grids[0]
        h = ad.as_tensor(hist_qgrid)
        if h.shape != (qh0, qw0):
            raise ConfigurationError(f"history input must be {qh0}x{qw0}, got {h.shape}")
        x = h.reshape(1, 1, qh0, qw0)
        x = self._conv("history.conv0", x, 1, pad=0)
        x = self._conv("history.conv1", x, 1, pad=0, act=False)
        return x.reshape(self.config.history_widths[1], qh0, qw0)

    def cross_view_attend(self, scale: int, q_tokens: Tensor, delta: Tensor, phi: Tensor) -> Tensor:
        """Scaled dot-product cross attention for one scale.

        q_tokens: (nq, cq) map-view queries; delta: (nt, d) positional
        tokens; phi: (nt, ch) visual tokens. Keys project [delta; phi],
        values project phi. Returns (nq, d).
        """
        if delta.shape[0] != phi.shape[0]:
            raise ConfigurationError("positional and visual token counts disagree")
        p = self.params
        q_tokens = self._norm(f"attn.s{scale}.ln_q", q_tokens)
        phi = self._norm(f"attn.s{scale}.ln_phi", phi)
        q = ad.matmul(q_tokens, p[f"attn.s{scale}.wq.w"]) + p[f"attn.s{scale}.wq.b"]
        kv_in = ad.concat([delta, phi], axis=1)
        k = ad.matmul(kv_in, p[f"attn.s{scale}.wk.w"]) + p[f"attn.s{scale}.wk.b"]
        v = ad.matmul(phi, p[f"attn.s{scale}.wv.w"]) + p[f"attn.s{scale}.wv.b"]

        heads = self.config.attention_heads
        d = q.shape[1]
        dh = d // heads
        outs = []
        for i in range(heads):
            sl = slice(i * dh, (i + 1) * dh)
            logits = ad.matmul(q[:, sl], k[:, sl].T) * (1.0 / math.sqrt(dh))
            attn = ad.softmax(logits, axis=-1)
            outs.append(ad.matmul(attn, v[:, sl]))
        return outs[0] if heads == 1 else ad.concat(outs, axis=1)

    def decode_and_head(self, scale_outputs: list[Tensor]) -> Tensor:
        """Fuse per-scale attention outputs into the anchored elevation map."""
        rows, cols = self.grid.rows, self.grid.cols
        wd = self.config.decoder_width
        fused = None
        for k, tokens in enumerate(scale_outputs):
            qh, qw = self.query_grids[k]
            proj = ad.matmul(tokens, self.params[f"decoder.s{k}.proj.w"]) + self.params[
                f"decoder.s{k}.proj.b"
            ]
            grid_feat = proj.T.reshape(wd, qh, qw)
            up = ad.bilinear_upsample2d(grid_feat, QUERY_FACTORS[k])
            up = up[:, :rows, :cols]
            fused = up if fused is None else fused + up
        x = self._channel_norm("decoder.ln", fused.reshape(1, wd, rows, cols))
        x = ad.silu(x)
        x = self._conv("head.conv0", x, 1)
        x = self._conv("head.conv1", x, 1, pad=0, act=False)
        out = x.reshape(rows, cols)
        ar, ac = self.grid.anchor
        return out - out[ar, ac]

    def forward(self, images: np.ndarray, pose: VehiclePose, hist_qgrid=None) -> Tensor:
        """Full forward pass to a (rows, cols) elevation tensor.

        images: (3, S, S, 3) uint8 or float; hist_qgrid: pooled masked
        history on the finest query grid, or None for zero history.
        """
        x = self._normalize_images(images)
        feats = self.backbone_forward(x)
        gravity = pose.gravity_matrix() if self.config.use_ope else np.eye(3)
        deltas = self.ope_embed(gravity)

        hist_enc = None
        if self.config.use_history:
            if hist_qgrid is None:
                hist_qgrid = np.zeros(self.query_grids[0])
            hist_enc = self.encode_history(hist_qgrid)

        q_embed = self.params["query.embed"]
        outs = []
        for k in range(3):
            qg = self.query_grids[k]
            qs = q_embed if q_embed.shape[1:] == qg else ad.adaptive_avg_pool2d(q_embed, qg)
            if hist_enc is not None:
                hs = hist_enc if hist_enc.shape[1:] == qg else ad.adaptive_avg_pool2d(hist_enc, qg)
                q_in = ad.concat([qs, hs], axis=0)
            else:
                q_in = qs
            cq = q_in.shape[0]
            q_tokens = q_in.reshape(cq, qg[0] * qg[1]).T

            n, ch, h, w = feats[k].shape
            cams = feats[k].reshape(n, ch, h * w)
            phi = ad.concat([cams[i].T for i in range(n)], axis=0)
            outs.append(self.cross_view_attend(k, q_tokens, deltas[k], phi))
        return self.decode_and_head(outs)

    def _normalize_images(self, images) -> np.ndarray:
        arr = np.asarray(images)
        s = self.config.image_size
        if arr.shape != (3, s, s, 3):
            raise ConfigurationError(f"expected image stack (3, {s}, {s}, 3), got {arr.shape}")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        return arr.astype(np.float64).transpose(0, 3, 1, 2) - 0.5

    # -- inference -----------------------------------------------------------

    def history_inputs(self, prev_map: ElevationMap | None, curr_pose: VehiclePose):
        """(pooled history, aligned previous map, overlap mask) for one frame.

        Zero history and None alignment for the first frame of a sequence.
        """
        qg = self.query_grids[0]
        if prev_map is None:
            return np.zeros(qg), None, None
        if prev_map.grid != self.grid:
            raise ConfigurationError(
                f"previous prediction grid {prev_map.grid} does not match model grid {self.grid}"
            )
        aligned, mask = align_previous(prev_map, curr_pose)
        hist = pool_masked_history(masked_history(aligned, mask), mask.mask, qg)
        return hist, aligned, mask

    def predict(
        self,
        images: np.ndarray,
        pose: VehiclePose,
        prev_map: ElevationMap | None = None,
        timestamp: float = 0.0,
    ) -> ElevationMap:
        """Predict one elevation map, recursing on the previous prediction if given."""
        hist, _, _ = self.history_inputs(prev_map, pose)
        with ad.no_grad():
            values = self.forward(images, pose, hist).data
        return ElevationMap(grid=self.grid, values=values, frame_pose=pose, timestamp=timestamp)
