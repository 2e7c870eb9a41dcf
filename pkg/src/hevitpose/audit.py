"""Per-layer parameter and FLOP accounting.

MAC counts are analytic: convolutions count output-position dot products,
transposed convolutions count the multiplies of the adjoint (equal to the
matching convolution's), linear layers count token * in * out, and attention
counts the two batched matmuls against the reduced key/value grid.
Normalization, softmax, activation, and residual traffic are tallied as
elementwise ops in their own column since reported GFLOPs conventionally
omit them.  Totals are emitted under both MAC conventions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

from .layers import ChannelLayerNorm, Conv2d, ConvTranspose2d, LayerNorm, Linear
from .model import HEViTPose, ModelConfig, PoseHead, Stage
from .params import ParamStore
from .patch_embed import Downsample, Stem

CONVENTIONS = ("mac1", "mac2")  # 1 MAC = 1 FLOP (default) or 2 FLOPs

_LN_OPS = 8      # per normalized element
_SOFTMAX_OPS = 4
_GELU_OPS = 6
_RELU_OPS = 1


@dataclass
class AuditRow:
    name: str
    params: int
    macs: int
    elem_ops: int


@dataclass
class AuditReport:
    rows: list[AuditRow]
    input_hw: tuple[int, int]
    convention: str = "mac1"

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_elem_ops(self) -> int:
        return sum(r.elem_ops for r in self.rows)

    def flops(self, convention: str | None = None) -> int:
        conv = convention or self.convention
        if conv not in CONVENTIONS:
            raise ValueError(f"unknown convention {conv!r}; choose from {CONVENTIONS}")
        return self.total_macs * (1 if conv == "mac1" else 2)

    def grouped(self, depth: int = 2) -> list[AuditRow]:
        """Rows aggregated by the first `depth` name components."""
        order: list[str] = []
        acc: dict[str, AuditRow] = {}
        for r in self.rows:
            key = ".".join(r.name.split(".")[:depth])
            if key not in acc:
                acc[key] = AuditRow(key, 0, 0, 0)
                order.append(key)
            g = acc[key]
            g.params += r.params
            g.macs += r.macs
            g.elem_ops += r.elem_ops
        return [acc[k] for k in order]

    def to_text(self, per_layer: bool = False) -> str:
        rows = self.rows if per_layer else self.grouped()
        name_w = max(len(r.name) for r in rows + [AuditRow("TOTAL", 0, 0, 0)])
        out = io.StringIO()
        out.write(f"{'layer':<{name_w}}  {'params':>12}  {'macs':>14}  {'flops':>14}  {'elem_ops':>12}\n")
        mult = 1 if self.convention == "mac1" else 2
        for r in rows:
            out.write(f"{r.name:<{name_w}}  {r.params:>12,}  {r.macs:>14,}  "
                      f"{r.macs * mult:>14,}  {r.elem_ops:>12,}\n")
        out.write(f"{'TOTAL':<{name_w}}  {self.total_params:>12,}  {self.total_macs:>14,}  "
                  f"{self.flops():>14,}  {self.total_elem_ops:>12,}\n")
        out.write(f"convention: {self.convention} (1 MAC = {mult} FLOP); "
                  f"input {self.input_hw[0]}x{self.input_hw[1]}; "
                  f"alt total: {self.total_macs * (3 - mult):,} FLOPs\n")
        return out.getvalue()

    def to_csv(self, path: str) -> None:
        mult = 1 if self.convention == "mac1" else 2
        with open(path, "w") as fh:
            fh.write("layer,params,macs,flops,convention\n")
            for r in self.rows:
                fh.write(f"{r.name},{r.params},{r.macs},{r.macs * mult},{self.convention}\n")
            fh.write(f"TOTAL,{self.total_params},{self.total_macs},{self.flops()},{self.convention}\n")


def count_params(model: HEViTPose) -> int:
    """Exact scalar count over the parameter store."""
    return model.params.scalar_count()


def _conv_rows(name: str, layer: Conv2d, h: int, w: int) -> tuple[list[AuditRow], int, int]:
    k, s, p, g = layer.kernel, layer.stride, layer.padding, layer.groups
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    macs = layer.cout * oh * ow * (layer.cin // g) * k * k
    elem = layer.cout * oh * ow if layer.bias is not None else 0
    return [AuditRow(name, layer.param_count(), macs, elem)], oh, ow


def _deconv_rows(name: str, layer: ConvTranspose2d, h: int, w: int) -> tuple[list[AuditRow], int, int]:
    k, s, p = layer.kernel, layer.stride, layer.padding
    oh = (h - 1) * s - 2 * p + k
    ow = (w - 1) * s - 2 * p + k
    macs = layer.cin * layer.cout * k * k * h * w
    elem = layer.cout * oh * ow if layer.bias is not None else 0
    return [AuditRow(name, layer.param_count(), macs, elem)], oh, ow


def _norm_row(name: str, layer: LayerNorm | ChannelLayerNorm, numel: int) -> AuditRow:
    return AuditRow(name, layer.param_count(), 0, _LN_OPS * numel)


def _linear_row(name: str, layer: Linear, tokens: int) -> AuditRow:
    return AuditRow(name, layer.param_count(), tokens * layer.din * layer.dout,
                    tokens * layer.dout if layer.bias is not None else 0)


def _stem_rows(stem: Stem, name: str, h: int, w: int) -> tuple[list[AuditRow], int, int]:
    rows: list[AuditRow] = []
    for i, layer in enumerate(stem.layers):
        if isinstance(layer, Conv2d):
            sub, h, w = _conv_rows(f"{name}.conv{i}", layer, h, w)
        else:
            sub, h, w = _deconv_rows(f"{name}.conv{i}", layer, h, w)
        rows.extend(sub)
        if i < len(stem.layers) - 1:
            rows.append(AuditRow(f"{name}.act{i}", 0, 0, _GELU_OPS * layer.cout * h * w))
    rows.append(_norm_row(f"{name}.norm", stem.norm, stem.norm.channels * h * w))
    return rows, h, w


def _block_rows(block, name: str, h: int, w: int) -> list[AuditRow]:
    cfg = block.cfg
    c = cfg.attn.channels
    n = h * w
    rows: list[AuditRow] = []

    pos, _, _ = _conv_rows(f"{name}.pos.conv", block.pos.conv, h, w)
    pos[0].elem_ops += c * n  # residual add
    rows.extend(pos)

    def ffn_rows(ffn, fname: str) -> list[AuditRow]:
        return [
            _norm_row(f"{fname}.norm", ffn.norm, n * c),
            _linear_row(f"{fname}.fc1", ffn.fc1, n),
            AuditRow(f"{fname}.act", 0, 0, _GELU_OPS * n * ffn.hidden),
            _linear_row(f"{fname}.fc2", ffn.fc2, n),
            AuditRow(f"{fname}.add", 0, 0, n * c),
        ]

    for i, ffn in enumerate(block.ffns_pre):
        rows.extend(ffn_rows(ffn, f"{name}.ffn_pre{i}"))

    rows.append(_norm_row(f"{name}.attn_norm", block.attn_norm, n * c))
    gc = cfg.attn.group_channels
    nr = (h // cfg.attn.ratio) * (w // cfg.attn.ratio)
    for g, ga in enumerate(block.attn.groups):
        gname = f"{name}.attn.group{g}"
        sr_rows, _, _ = _conv_rows(f"{gname}.sr.conv", ga.sr.conv, h, w)
        rows.extend(sr_rows)
        rows.append(_norm_row(f"{gname}.sr.norm", ga.sr.norm, nr * gc))
        rows.append(_linear_row(f"{gname}.q", ga.q, n))
        rows.append(_linear_row(f"{gname}.k", ga.k, nr))
        rows.append(_linear_row(f"{gname}.v", ga.v, nr))
        rows.append(AuditRow(f"{gname}.qk", 0, n * nr * gc, n * nr * cfg.attn.heads))
        rows.append(AuditRow(f"{gname}.softmax", 0, 0, _SOFTMAX_OPS * n * nr * cfg.attn.heads))
        rows.append(AuditRow(f"{gname}.av", 0, n * nr * gc, 0))
        if g > 0:
            rows.append(AuditRow(f"{gname}.cascade_add", 0, 0, n * gc))
    rows.append(_linear_row(f"{name}.attn.proj", block.attn.proj, n))
    rows.append(AuditRow(f"{name}.attn.add", 0, 0, n * c))

    for i, ffn in enumerate(block.ffns_post):
        rows.extend(ffn_rows(ffn, f"{name}.ffn_post{i}"))
    return rows


def _stage_rows(stage: Stage, name: str, h: int, w: int) -> tuple[list[AuditRow], int, int]:
    rows: list[AuditRow] = []
    if isinstance(stage.entry, Stem):
        sub, h, w = _stem_rows(stage.entry, f"{name}.embed", h, w)
        rows.extend(sub)
    else:
        down: Downsample = stage.entry
        sub, h, w = _conv_rows(f"{name}.down.conv", down.conv, h, w)
        rows.extend(sub)
        rows.append(_norm_row(f"{name}.down.norm", down.norm, down.norm.channels * h * w))
    for i, block in enumerate(stage.blocks):
        rows.extend(_block_rows(block, f"{name}.block{i}", h, w))
    return rows, h, w


def _head_rows(head: PoseHead, name: str, h: int, w: int) -> list[AuditRow]:
    rows: list[AuditRow] = []
    sub, h, w = _deconv_rows(f"{name}.deconv0", head.deconv0, h, w)
    rows.extend(sub)
    rows.append(_norm_row(f"{name}.norm0", head.norm0, head.norm0.channels * h * w))
    rows.append(AuditRow(f"{name}.relu0", 0, 0, _RELU_OPS * head.norm0.channels * h * w))
    sub, h, w = _deconv_rows(f"{name}.deconv1", head.deconv1, h, w)
    rows.extend(sub)
    rows.append(_norm_row(f"{name}.norm1", head.norm1, head.norm1.channels * h * w))
    rows.append(AuditRow(f"{name}.relu1", 0, 0, _RELU_OPS * head.norm1.channels * h * w))
    out_rows, _, _ = _conv_rows(f"{name}.out", head.out, h, w)
    rows.extend(out_rows)
    return rows


def audit_model(model: HEViTPose, input_hw: tuple[int, int] | None = None,
                convention: str = "mac1") -> AuditReport:
    h, w = input_hw or model.cfg.input_hw
    rows: list[AuditRow] = []
    for i, stage in enumerate(model.stages):
        sub, h, w = _stage_rows(stage, f"stage{i + 1}", h, w)
        rows.extend(sub)
    rows.extend(_head_rows(model.head, "head", h, w))
    report = AuditReport(rows, input_hw or model.cfg.input_hw, convention)
    store_count = count_params(model)
    if report.total_params != store_count:
        raise AssertionError(
            f"audit books disagree with the parameter store: {report.total_params} vs {store_count}")
    return report


def count_flops(model: HEViTPose, input_hw: tuple[int, int] | None = None,
                convention: str = "mac1") -> int:
    return audit_model(model, input_hw, convention).flops()


def family_table(preset_names: list[str], input_hw: tuple[int, int] = (256, 256),
                 convention: str = "mac1", seed: int = 0) -> list[tuple[str, AuditReport]]:
    from .model import build_model, preset

    out = []
    for name in preset_names:
        cfg = preset(name, input_hw=input_hw)
        out.append((name, audit_model(build_model(cfg, seed=seed), convention=convention)))
    return out


def family_text(table: list[tuple[str, AuditReport]]) -> str:
    mult = 1 if (table and table[0][1].convention == "mac1") else 2
    lines = [f"{'model':<8}{'params':>14}{'macs':>16}{'flops':>16}{'elem_ops':>14}"]
    for name, rep in table:
        lines.append(f"{name:<8}{rep.total_params:>14,}{rep.total_macs:>16,}"
                     f"{rep.flops():>16,}{rep.total_elem_ops:>14,}")
    lines.append(f"convention: {table[0][1].convention} (1 MAC = {mult} FLOP)" if table else "")
    return "\n".join(lines) + "\n"


def family_csv(table: list[tuple[str, AuditReport]], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("layer,params,macs,flops,convention\n")
        for name, rep in table:
            fh.write(f"{name},{rep.total_params},{rep.total_macs},{rep.flops()},{rep.convention}\n")
