"""LDPM units, the DPN assembly, the plain-CNN control, and parse traces."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import layers as L
from .tensor import DTYPE, Rng, he_init

CONV_KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (32, 64, 128, 256, 512, 1024)
    width: int = 3
    downsample_after: tuple = (1, 3)
    num_classes: int = 10
    input_shape: tuple = (1, 28, 28)
    batch_norm: bool = False
    dm_window: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "downsample_after", tuple(sorted(int(i) for i in self.downsample_after)))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Desk-scale DPN: three units 8 -> 16 -> 32, pooled after the first two."""
        kw.setdefault("channels", (8, 16, 32))
        kw.setdefault("downsample_after", (0, 1))
        return cls(**kw)

    def validate(self) -> "ModelConfig":
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"channel schedule must be non-empty and positive: {self.channels}")
        if self.width < 1:
            raise ValueError(f"unit width must be >= 1, got {self.width}")
        if self.dm_window < 1 or self.dm_window % 2 == 0:
            raise ValueError(f"dm_window must be a positive odd integer, got {self.dm_window}")
        if len(set(self.downsample_after)) != len(self.downsample_after) or any(
                not 0 <= i < len(self.channels) for i in self.downsample_after):
            raise ValueError(f"invalid downsample indices {self.downsample_after} "
                             f"for {len(self.channels)} units")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ValueError(f"input_shape must be [C, H, W], got {self.input_shape}")
        return self

    def to_text(self) -> str:
        """Canonical ``key=value`` form, one key per line in field order."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        tuple_keys = {"channels", "downsample_after", "input_shape"}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            if key in tuple_keys:
                kw[key] = tuple(int(x) for x in val.split(",") if x)
            elif key == "batch_norm":
                kw[key] = val == "true"
            else:
                kw[key] = int(val)
        return cls(**kw)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


@dataclass
class LdpmUnitSpec:
    in_channels: int
    out_channels: int
    width: int = 3
    dm_window: int = 3
    batch_norm: bool = False
    downsample: bool = False

    def branch_window(self, b: int) -> int:
        """Effective window of 1-indexed branch b."""
        return (b - 1) * (self.dm_window - 1) + 1


class LdpmUnit:
    """Parallel DM branches into one shared conv, entry-wise maxout, activation.

    Branch ``b`` (1-indexed) stacks ``b - 1`` DM layers, each with its own
    penalties, before the conv shared by every branch.
    """

    def __init__(self, spec: LdpmUnitSpec, rng: Rng):
        self.spec = spec
        k = CONV_KERNEL
        fan_in = spec.in_channels * k * k
        self.conv = L.ConvParams(he_init(rng, (spec.out_channels, spec.in_channels, k, k), fan_in),
                                 np.zeros(spec.out_channels))
        self.dms = [[L.DmParams.identity(spec.in_channels, spec.dm_window) for _ in range(b)]
                    for b in range(spec.width)]
        self.bn = L.BnParams.fresh(spec.out_channels) if spec.batch_norm else None

    def named_parameters(self, prefix: str) -> dict:
        out = {f"{prefix}.conv.weight": self.conv.weight, f"{prefix}.conv.bias": self.conv.bias}
        for b, chain in enumerate(self.dms):
            for j, p in enumerate(chain):
                out[f"{prefix}.branch{b + 1}.dm{j + 1}.alpha"] = p.alpha
                out[f"{prefix}.branch{b + 1}.dm{j + 1}.beta"] = p.beta
        if self.bn is not None:
            out[f"{prefix}.bn.gamma"] = self.bn.gamma
            out[f"{prefix}.bn.shift"] = self.bn.shift
        return out

    def buffers(self, prefix: str) -> dict:
        if self.bn is None:
            return {}
        return {f"{prefix}.bn.running_mean": self.bn.running_mean,
                f"{prefix}.bn.running_var": self.bn.running_var}

    def forward(self, x, train=False):
        branch_out, branch_tapes = [], []
        for chain in self.dms:
            h, tapes = x, []
            for p in chain:
                h, t = L.dm_forward(h, p)
                tapes.append(t)
            z, ct = L.conv2d_forward(h, self.conv)
            tapes.append(ct)
            branch_out.append(z)
            branch_tapes.append(tapes)
        m, mt = L.branch_maxout_forward(branch_out)
        tape = {"branches": branch_tapes, "maxout": mt}
        if self.bn is not None:
            m, tape["bn"] = L.batchnorm_forward(m, self.bn, train=train)
        a, tape["relu"] = L.relu_forward(m)
        tape["pre_pool"] = a
        if self.spec.downsample:
            a, tape["pool"] = L.maxpool2_forward(a)
        return a, tape

    def backward(self, g, tape, prefix: str):
        grads = {}
        if self.spec.downsample:
            g = L.maxpool2_backward(g, tape["pool"])
        g = L.relu_backward(g, tape["relu"])
        if self.bn is not None:
            g, gg, gs = L.batchnorm_backward(g, tape["bn"], self.bn)
            grads[f"{prefix}.bn.gamma"] = gg
            grads[f"{prefix}.bn.shift"] = gs
        branch_grads = L.branch_maxout_backward(g, tape["maxout"])
        grad_w = np.zeros_like(self.conv.weight)
        grad_b = np.zeros_like(self.conv.bias)
        grad_x = None
        for b, (chain, tapes, gb) in enumerate(zip(self.dms, tape["branches"], branch_grads)):
            gh, gw, gbias = L.conv2d_backward(gb, tapes[-1], self.conv)
            grad_w += gw
            grad_b += gbias
            for j in reversed(range(len(chain))):
                gh, ga, gbeta = L.dm_backward(gh, tapes[j], chain[j])
                grads[f"{prefix}.branch{b + 1}.dm{j + 1}.alpha"] = ga
                grads[f"{prefix}.branch{b + 1}.dm{j + 1}.beta"] = gbeta
            grad_x = gh if grad_x is None else grad_x + gh
        grads[f"{prefix}.conv.weight"] = grad_w
        grads[f"{prefix}.conv.bias"] = grad_b
        return grad_x, grads

    def num_parameters(self) -> int:
        return sum(a.size for a in self.named_parameters("u").values())


class Model:
    """A stack of LDPM units, a global spatial max, and an FC classifier."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config.validate()
        c_in = config.input_shape[0]
        self.units = []
        for n, c_out in enumerate(config.channels):
            spec = LdpmUnitSpec(c_in, c_out, config.width, config.dm_window, config.batch_norm,
                                n in config.downsample_after)
            self.units.append(LdpmUnit(spec, rng.child(n)))
            c_in = c_out
        fc_rng = rng.child(len(config.channels))
        self.fc = L.FcParams(he_init(fc_rng, (config.num_classes, c_in), c_in),
                             np.zeros(config.num_classes))

    @property
    def feature_dim(self) -> int:
        return self.config.channels[-1]

    def named_parameters(self) -> dict:
        out = {}
        for n, unit in enumerate(self.units):
            out.update(unit.named_parameters(f"unit{n}"))
        out["fc.weight"] = self.fc.weight
        out["fc.bias"] = self.fc.bias
        return out

    def buffers(self) -> dict:
        out = {}
        for n, unit in enumerate(self.units):
            out.update(unit.buffers(f"unit{n}"))
        return out

    def num_parameters(self) -> int:
        return sum(a.size for a in self.named_parameters().values())

    def _check_input(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ValueError(f"model expects input [N, {', '.join(map(str, self.config.input_shape))}],"
                             f" got {x.shape}")
        return x

    def forward_features(self, x, train=False):
        x = self._check_input(x)
        tape = {"units": [], "input": x}
        h = x
        for unit in self.units:
            h, t = unit.forward(h, train=train)
            tape["units"].append(t)
        tape["last_map"] = h
        feats, tape["gmax"] = L.global_spatial_max_forward(h)
        return feats, tape

    def forward(self, x, train=False):
        """Logits ``[N, K]`` and the tape needed by :meth:`backward`."""
        feats, tape = self.forward_features(x, train=train)
        logits, tape["fc"] = L.fc_forward(feats, self.fc)
        return logits, tape

    def features(self, x) -> np.ndarray:
        return self.forward_features(x)[0]

    def backward(self, grad_logits, tape) -> dict:
        grads = {}
        g, grads["fc.weight"], grads["fc.bias"] = L.fc_backward(grad_logits, tape["fc"], self.fc)
        g = L.global_spatial_max_backward(g, tape["gmax"])
        for n in reversed(range(len(self.units))):
            g, ug = self.units[n].backward(g, tape["units"][n], f"unit{n}")
            grads.update(ug)
        grads["input"] = g
        return grads

    def update_running_stats(self, tape):
        for unit, t in zip(self.units, tape["units"]):
            if unit.bn is not None:
                L.batchnorm_update_running(unit.bn, t["bn"])

    def loss_and_grads(self, x, labels, reduction="mean"):
        logits, tape = self.forward(x, train=True)
        loss, g = L.softmax_cross_entropy(logits, labels)
        if reduction == "sum":
            n = logits.shape[0]
            loss, g = loss * n, g * n
        grads = self.backward(g, tape)
        grads.pop("input")
        return loss, logits, grads, tape

    def depth(self) -> int:
        """DM + conv + FC layers along the longest input-to-output path."""
        return sum(u.spec.width for u in self.units) + 1

    def summary(self) -> str:
        c, h, w = self.config.input_shape
        rows = [("layer", "output shape", "params")]
        rows.append(("input", f"[{c}, {h}, {w}]", "0"))
        for n, unit in enumerate(self.units):
            s = unit.spec
            n_dm = s.width * (s.width - 1) // 2
            rows.append((f"unit{n} ({s.width} branches, {n_dm} DM {s.dm_window}x{s.dm_window}, "
                         f"shared conv 3x3{', bn' if s.batch_norm else ''})",
                         f"[{s.out_channels}, {h}, {w}]", str(unit.num_parameters())))
            if s.downsample:
                h, w = (h + 1) // 2, (w + 1) // 2
                rows.append((f"unit{n} maxpool 2x2", f"[{s.out_channels}, {h}, {w}]", "0"))
        rows.append(("global spatial max", f"[{self.feature_dim}]", "0"))
        rows.append(("fc", f"[{self.config.num_classes}]", str(self.fc.weight.size + self.fc.bias.size)))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(r[i].ljust(widths[i]) for i in range(3)) for r in rows]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        lines.append("")
        lines.append(f"total parameters: {self.num_parameters()}")
        lines.append(f"longest-path depth: {self.depth()} "
                     "(counting DM, conv and FC layers along the widest branch of every unit)")
        return "\n".join(lines)


def build_dpn(cfg: ModelConfig, rng: Rng) -> Model:
    return Model(cfg, rng)


def build_baseline_cnn(cfg: ModelConfig, rng: Rng, match_params: bool = False) -> Model:
    """Plain conv+ReLU control: the same schedule and head with width forced to 1.

    With ``match_params`` the channel schedule is scaled by a common factor so
    the parameter count lands as close as possible to the width-``cfg.width``
    DPN (the DM penalties otherwise leave the control smaller).
    """
    base = replace(cfg, width=1).validate()
    if not match_params:
        return Model(base, rng)
    target = parameter_count(cfg)
    best = None
    for scale in np.arange(1.0, 2.0, 0.01):
        chans = tuple(max(1, int(round(c * scale))) for c in cfg.channels)
        count = parameter_count(replace(base, channels=chans))
        if best is None or abs(count - target) < abs(best[1] - target):
            best = (chans, count)
    return Model(replace(base, channels=best[0]), rng)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count."""
    total = 0
    c_in = cfg.input_shape[0]
    n_dm = cfg.width * (cfg.width - 1) // 2
    for c_out in cfg.channels:
        total += c_out * c_in * CONV_KERNEL ** 2 + c_out
        total += n_dm * 2 * c_in * cfg.dm_window ** 2
        if cfg.batch_norm:
            total += 2 * c_out
        c_in = c_out
    return total + cfg.num_classes * c_in + cfg.num_classes


# ---------------------------------------------------------------------------
# spatial parse traces

@dataclass
class TraceNode:
    kind: str  # "unit" | "conv" | "dm" | "input"
    unit: int
    channel: int
    pixel: tuple
    offset: Optional[tuple] = None
    branch: Optional[int] = None
    value: Optional[float] = None
    padding: bool = False
    children: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "unit": self.unit, "channel": self.channel,
             "pixel": list(self.pixel)}
        if self.offset is not None:
            d["offset"] = list(self.offset)
        if self.branch is not None:
            d["branch"] = self.branch
        if self.value is not None:
            d["value"] = self.value
        if self.padding:
            d["padding"] = True
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        return d

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def lines(self, depth=0):
        parts = [self.kind, f"unit={self.unit}", f"channel={self.channel}",
                 f"pixel=({self.pixel[0]},{self.pixel[1]})"]
        if self.branch is not None:
            parts.append(f"branch={self.branch}")
        if self.offset is not None:
            parts.append(f"offset=({self.offset[0]},{self.offset[1]})")
        if self.value is not None:
            parts.append(f"value={self.value:.9g}")
        if self.padding:
            parts.append("padding")
        out = ["  " * depth + " ".join(parts)]
        for c in self.children:
            out.extend(c.lines(depth + 1))
        return out


@dataclass
class ParseTrace:
    roots: list
    image_shape: tuple

    def nodes(self):
        for r in self.roots:
            yield from r.walk()

    def to_text(self) -> str:
        out = [f"# parse trace, image shape {list(self.image_shape)}, {len(self.roots)} roots"]
        for r in self.roots:
            out.extend(r.lines())
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {"image_shape": list(self.image_shape), "roots": [r.to_dict() for r in self.roots]}


def extract_parse_trace(model: Model, image, channels=None, fanout: int = 1) -> ParseTrace:
    """Walk the argmax tapes of one image down from the global-max winners.

    Each root is a final-unit channel at its globally winning pixel. Below a
    unit node, the winning branch's conv contributes its ``fanout`` strongest
    positive (input channel, tap) terms; each is followed through that
    branch's DM offsets down to the unit input, then into the previous unit.
    """
    x = model._check_input(image)
    if x.shape[0] != 1:
        raise ValueError("parse traces are extracted for a single image")
    _, tape = model.forward_features(x)
    last = len(model.units) - 1
    rc = L.global_max_pixels(tape["gmax"])[0]
    chans = range(model.feature_dim) if channels is None else channels
    roots = []
    for c in chans:
        r, s = int(rc[c, 0]), int(rc[c, 1])
        roots.append(_trace_unit(model, tape, last, c, (r, s), fanout))
    return ParseTrace(roots, tuple(x.shape[1:]))


def _trace_unit(model, tape, n, c, pix, fanout):
    unit, ut = model.units[n], tape["units"][n]
    r, s = pix
    if unit.spec.downsample:
        r, s = L.pool_source_pixel(ut["pool"], 0, c, r, s)
    b = int(ut["maxout"].saved["arg"][0, c, r, s])
    node = TraceNode("unit", n, c, (r, s), branch=b + 1, value=float(ut["pre_pool"][0, c, r, s]))
    branch_tapes = ut["branches"][b]
    conv_tape = branch_tapes[-1]
    xp = conv_tape.saved["xp"][0]
    k = CONV_KERNEL
    rad = k // 2
    contrib = unit.conv.weight[c] * xp[:, r:r + k, s:s + k]  # [Ci, k, k]
    flat = contrib.ravel()
    order = np.argsort(-flat, kind="stable")[:fanout]
    for idx in order:
        if flat[idx] <= 0:
            break
        ci, du, dv = np.unravel_index(idx, contrib.shape)
        q = (r + int(du) - rad, s + int(dv) - rad)
        tap = TraceNode("conv", n, int(ci), q, offset=(int(du) - rad, int(dv) - rad),
                        branch=b + 1, value=float(flat[idx]))
        node.children.append(tap)
        parent = tap
        h, w = conv_tape.saved["shape"][2:]
        inside = True
        for j in reversed(range(len(branch_tapes) - 1)):
            off = L.dm_offsets(branch_tapes[j])[0, ci, q[0], q[1]]
            dy, dx = int(off[0]), int(off[1])
            src = (q[0] + dy, q[1] + dx)
            pad = not (0 <= src[0] < h and 0 <= src[1] < w)
            dm = TraceNode("dm", n, int(ci), q, offset=(dy, dx), branch=b + 1, padding=pad)
            parent.children.append(dm)
            parent = dm
            q = src
            if pad:
                inside = False
                break
        if not inside:
            continue
        if n == 0:
            parent.children.append(TraceNode("input", -1, int(ci), q,
                                             value=float(tape["input"][0, ci, q[0], q[1]])))
        else:
            parent.children.append(_trace_unit(model, tape, n - 1, int(ci), q, fanout))
    return node
