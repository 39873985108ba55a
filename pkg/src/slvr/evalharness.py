"""Paired-question evaluation, ablation grids and report emission."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import model as M
from .numerics.serialize import atomic_write_bytes
from .stage1 import multiquery_sequences
from .synthworld import VOCAB, MultiQuerySample, WorldConfig

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("sample_id", "q1_pred", "q1_gold", "q1_ok", "q2_pred", "q2_gold", "q2_ok")
SUMMARY_COLUMNS = ("config_name", "seed", "Q1", "Q2", "Both")


class CompatibilityError(ValueError):
    """Checkpoint and dataset disagree on vocabulary or shapes."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    q1_pred: int
    q1_gold: int
    q2_pred: int
    q2_gold: int

    @property
    def q1_ok(self) -> bool:
        return self.q1_pred == self.q1_gold

    @property
    def q2_ok(self) -> bool:
        return self.q2_pred == self.q2_gold


@dataclass
class EvalResult:
    records: list[SampleRecord]

    def _pct(self, fn) -> float:
        if not self.records:
            return 0.0
        return 100.0 * sum(1 for r in self.records if fn(r)) / len(self.records)

    @property
    def q1(self) -> float:
        return self._pct(lambda r: r.q1_ok)

    @property
    def q2(self) -> float:
        return self._pct(lambda r: r.q2_ok)

    @property
    def both(self) -> float:
        return self._pct(lambda r: r.q1_ok and r.q2_ok)

    def summary(self) -> dict[str, float]:
        return {"Q1": self.q1, "Q2": self.q2, "Both": self.both}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in self.records:
            w.writerow([r.sample_id, VOCAB[r.q1_pred], VOCAB[r.q1_gold], int(r.q1_ok),
                        VOCAB[r.q2_pred], VOCAB[r.q2_gold], int(r.q2_ok)])
        return buf.getvalue()


def check_vocab(meta: dict, vocab) -> None:
    """Raise :class:`CompatibilityError` if the checkpoint vocabulary differs from ``vocab``."""
    ckpt_vocab = meta.get("vocab")
    if ckpt_vocab is not None and list(ckpt_vocab) != list(vocab):
        raise CompatibilityError("checkpoint vocabulary does not match the dataset vocabulary")
    cfg = meta.get("model_config", {})
    if "vocab_size" in cfg and cfg["vocab_size"] != len(vocab):
        raise CompatibilityError(f"checkpoint vocab_size {cfg['vocab_size']} != dataset vocabulary {len(vocab)}")


def evaluate(arrays: dict[str, np.ndarray], cfg: M.ModelConfig, samples: list[MultiQuerySample],
             world: WorldConfig, decode: str = "greedy", batch: int = 128) -> EvalResult:
    """Answer both questions of every sample with argmax decoding."""
    if decode != "greedy":
        raise ValueError(f"only greedy decoding is supported for evaluation, got {decode!r}")
    params = M.as_params(arrays, requires_grad=False)
    seqs = multiquery_sequences(samples, world, cfg)
    records = []
    for start in range(0, len(samples), batch):
        chunk = list(range(start, min(start + batch, len(samples))))
        enc = M.encode(params, cfg, M.layout_encode(cfg, [seqs[i][0] for i in chunk]))
        n = len(chunk)
        src = np.concatenate([np.arange(n), np.arange(n)])
        questions = [seqs[i][0].question for i in chunk] + [seqs[i][1].question for i in chunk]
        dec = M.decode(params, cfg, enc, M.layout_decode(cfg, enc.layout, src, questions))
        pred = dec.logits.data[:, -1, :].argmax(axis=1)
        for j, i in enumerate(chunk):
            s = samples[i]
            records.append(SampleRecord(i, int(pred[j]), s.answer1, int(pred[n + j]), s.answer2))
    return EvalResult(records)


def evaluate_checkpoint(path, samples: list[MultiQuerySample], world: WorldConfig, vocab=None) -> EvalResult:
    arrays, _, meta = M.load_checkpoint(path)
    check_vocab(meta, VOCAB if vocab is None else vocab)
    if vocab is not None and list(vocab) != list(VOCAB):
        raise CompatibilityError("dataset vocabulary does not match this build's vocabulary")
    return evaluate(arrays, M.config_from_meta(meta), samples, world)


# -- ablations -----------------------------------------------------------------------

@dataclass(frozen=True)
class AblationSpec:
    """Additive component toggles; the consistency/stability rewards need GRPO."""

    name: str
    stage1_sem_loss: bool = True
    multi_query_data: bool = True
    grpo: bool = True
    mgrpo_consistency_stability: bool = True

    def __post_init__(self):
        if self.mgrpo_consistency_stability and not self.grpo:
            raise ValueError(f"ablation {self.name!r}: consistency/stability rewards require grpo")
        if self.mgrpo_consistency_stability and not self.multi_query_data:
            raise ValueError(f"ablation {self.name!r}: consistency reward needs paired queries")


STANDARD_ABLATIONS = (
    AblationSpec("LVR", stage1_sem_loss=False, multi_query_data=False, grpo=False, mgrpo_consistency_stability=False),
    AblationSpec("+Stage1", multi_query_data=False, grpo=False, mgrpo_consistency_stability=False),
    AblationSpec("+GRPO (Single-Q)", multi_query_data=False, mgrpo_consistency_stability=False),
    AblationSpec("+Multi-Q", mgrpo_consistency_stability=False),
    AblationSpec("Full", ),
)


def ablation_by_name(name: str) -> AblationSpec:
    for spec in STANDARD_ABLATIONS:
        if spec.name == name:
            return spec
    raise KeyError(f"unknown ablation {name!r}; known: {[s.name for s in STANDARD_ABLATIONS]}")


@dataclass
class AblationCell:
    spec: str
    seed: int
    result: EvalResult | None
    error: str | None = None


@dataclass
class AblationRow:
    spec: str
    cells: list[AblationCell] = field(default_factory=list)

    def stat(self, metric: str) -> tuple[float, float]:
        vals = [getattr(c.result, metric) for c in self.cells if c.result is not None]
        if not vals:
            return math.nan, math.nan
        return float(np.mean(vals)), float(np.std(vals))


def stage1_cache_key(stage1_config, seed: int, sem_loss: bool) -> tuple:
    """Key under which :func:`run_ablation_grid` caches a stage-1 run as ``(params, meta)``."""
    s1cfg = replace(stage1_config, seed=seed, w_sem=stage1_config.w_sem if sem_loss else 0.0)
    return ("stage1", seed, sem_loss, tuple(sorted(asdict(s1cfg).items())))


def stage1_meta(cfg: M.ModelConfig, seed: int, step: int) -> dict:
    return {"stage": 1, "complete": True, "step": step, "seed": seed,
            "model_config": asdict(cfg), "vocab": list(VOCAB)}


def run_ablation_grid(specs, world: WorldConfig, cfg: M.ModelConfig, stage1_config, mgrpo_config,
                      seeds, data=None, cache=None) -> list[AblationRow]:
    """Train every spec end to end for every seed and evaluate on the eval split.

    ``data`` maps ``"stage1"``, ``"stage2"`` and ``"eval"`` to sample lists
    (generated from ``world`` when omitted). Stage-1 runs are shared between
    specs that agree on the stage-1 toggle; ``cache`` may be a dict kept across
    calls. A failed cell is recorded and the grid continues.
    """
    from . import stage1 as S1
    from .mgrpo import train_stage2
    from .synthworld import multiquery_samples, stage1_samples

    if data is None:
        data = {"stage1": stage1_samples(world), "stage2": multiquery_samples(world, "train_stage2", world.n_stage2)}
        data["eval"] = multiquery_samples(world, "svqa_eval", world.n_eval)
    cache = {} if cache is None else cache
    prepared = cache.setdefault("prepared", {})
    rows = []
    for spec in specs:
        row = AblationRow(spec.name)
        for seed in seeds:
            try:
                key = stage1_cache_key(stage1_config, seed, spec.stage1_sem_loss)
                if key not in cache:
                    if "stage1" not in prepared:
                        prepared["stage1"] = S1.prepare(data["stage1"], world, cfg)
                    s1cfg = replace(stage1_config, seed=seed,
                                    w_sem=stage1_config.w_sem if spec.stage1_sem_loss else 0.0)
                    res1 = S1.train_stage1(s1cfg, prepared["stage1"], cfg)
                    cache[key] = (res1.params, stage1_meta(cfg, seed, res1.step))
                params, meta = cache[key]
                if spec.grpo:
                    akey = ("anchors",) + key
                    if akey not in cache:
                        pool = data["stage2"][: mgrpo_config.num_groups]
                        cache[akey] = S1.extract_anchors(params, meta, pool, world)
                    m = replace(mgrpo_config, seed=seed,
                                query_mode="paired" if spec.multi_query_data else "single")
                    if not spec.mgrpo_consistency_stability:
                        m = replace(m, w_cons=0.0, w_stab=0.0)
                    params = train_stage2(m, data["stage2"], world, params, meta, cache[akey]).params
                result = evaluate(params, cfg, data["eval"], world)
                row.cells.append(AblationCell(spec.name, seed, result))
                log.info("ablation %s seed %d: Q1=%.1f Q2=%.1f Both=%.1f", spec.name, seed,
                         result.q1, result.q2, result.both)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                log.warning("ablation %s seed %d failed: %s", spec.name, seed, exc)
                row.cells.append(AblationCell(spec.name, seed, None, f"{type(exc).__name__}: {exc}"))
        rows.append(row)
    return rows


# -- reports -------------------------------------------------------------------------

def summary_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        for c in row.cells:
            if c.result is None:
                w.writerow([row.spec, c.seed, "failed", "failed", "failed"])
            else:
                w.writerow([row.spec, c.seed, repr(c.result.q1), repr(c.result.q2), repr(c.result.both)])
    return buf.getvalue()


def parse_summary_csv(text: str) -> dict[str, dict[str, tuple[float, float]]]:
    """Per config name: metric -> (mean, std) over seeds, skipping failed cells."""
    acc: dict[str, dict[str, list[float]]] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        vals = acc.setdefault(rec["config_name"], {"Q1": [], "Q2": [], "Both": []})
        if rec["Both"] == "failed":
            continue
        for k in vals:
            vals[k].append(float(rec[k]))
    return {name: {k: (float(np.mean(v)) if v else math.nan, float(np.std(v)) if v else math.nan)
                   for k, v in m.items()} for name, m in acc.items()}


def _sorted(rows: list[AblationRow]) -> list[AblationRow]:
    def key(row):
        m = row.stat("both")[0]
        return -m if not math.isnan(m) else math.inf
    return sorted(rows, key=key)


def text_table(rows: list[AblationRow]) -> str:
    """Fixed-width table of mean±std per spec, sorted by Both descending."""
    header = f"{'config':<20} {'Q1':>13} {'Q2':>13} {'Both':>13} {'seeds':>6}"
    lines = [header, "-" * len(header)]
    for row in _sorted(rows):
        cells = []
        for metric in ("q1", "q2", "both"):
            m, s = row.stat(metric)
            cells.append("failed".rjust(13) if math.isnan(m) else f"{m:6.1f} ± {s:4.1f}")
        ok = sum(c.result is not None for c in row.cells)
        lines.append(f"{row.spec:<20} {cells[0]:>13} {cells[1]:>13} {cells[2]:>13} {ok:>3}/{len(row.cells):<2}")
    return "\n".join(lines) + "\n"


def svg_chart(rows: list[AblationRow], width: int = 640, height: int = 360) -> str:
    """Grouped bar chart of mean Q1/Q2/Both per spec."""
    rows = _sorted(rows)
    left, right, top, bottom = 56, 16, 28, 72
    plot_w, plot_h = width - left - right, height - top - bottom
    colors = {"q1": "#4c78a8", "q2": "#f58518", "both": "#54a24b"}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for tick in range(0, 101, 20):
        y = top + plot_h * (1 - tick / 100)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + plot_w}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{tick}</text>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>')
    slot = plot_w / max(1, len(rows))
    bar = slot / 4
    for k, row in enumerate(rows):
        x0 = left + k * slot + bar / 2
        for j, metric in enumerate(("q1", "q2", "both")):
            m = row.stat(metric)[0]
            m = 0.0 if math.isnan(m) else m
            h = plot_h * m / 100
            out.append(f'<rect x="{x0 + j * bar:.1f}" y="{top + plot_h - h:.1f}" width="{bar * 0.9:.1f}" '
                       f'height="{h:.1f}" fill="{colors[metric]}"/>')
        out.append(f'<text x="{left + (k + 0.5) * slot:.1f}" y="{top + plot_h + 16}" '
                   f'text-anchor="middle">{escape(row.spec)}</text>')
    out.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 14}" text-anchor="middle">configuration</text>')
    out.append(f'<text x="14" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + plot_h / 2:.1f})">accuracy (%)</text>')
    for j, metric in enumerate(("q1", "q2", "both")):
        x = left + 8 + j * 70
        out.append(f'<rect x="{x}" y="8" width="10" height="10" fill="{colors[metric]}"/>')
        out.append(f'<text x="{x + 14}" y="17">{"Both" if metric == "both" else metric.upper()}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(rows: list[AblationRow], out_dir, svg: bool = True) -> dict[str, Path]:
    """Write ``summary.txt``, ``summary.csv`` and optionally ``summary.svg``."""
    if not rows:
        raise ValueError("emit_report needs at least one result row")
    out = Path(out_dir)
    files = {"table": (out / "summary.txt", text_table(rows)), "csv": (out / "summary.csv", summary_csv(rows))}
    if svg:
        files["svg"] = (out / "summary.svg", svg_chart(rows))
    written = {}
    for name, (path, text) in files.items():
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            atomic_write_bytes(path, text.encode("utf-8"))
        except OSError as exc:
            raise OSError(f"cannot write report file {path}: {exc}") from exc
        written[name] = path
    return written
