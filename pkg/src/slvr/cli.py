"""Command-line entry point: ``slvr <command> --config run.json ...``.

Exit codes: 0 ok, 1 internal error, 2 configuration error, 3 stage-order
violation, 4 compatibility error.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SLVR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import dataclasses  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from . import evalharness as E  # noqa: E402
from . import mgrpo as G  # noqa: E402
from . import model as M  # noqa: E402
from . import stage1 as S1  # noqa: E402
from . import synthworld as W  # noqa: E402
from .numerics.optim import Adam  # noqa: E402
from .numerics.serialize import FormatError, atomic_write_bytes  # noqa: E402

log = logging.getLogger("slvr")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_STAGE, EXIT_COMPAT = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class StageOrderError(RuntimeError):
    pass


# -- run configuration ----------------------------------------------------------------

@dataclasses.dataclass
class EvalConfig:
    svg: bool = True
    specs: tuple = ("+GRPO (Single-Q)", "+Multi-Q", "Full")
    seeds: tuple = (0, 1, 2)


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    world: W.WorldConfig = dataclasses.field(default_factory=W.WorldConfig)
    model: M.ModelConfig = dataclasses.field(default_factory=M.ModelConfig)
    stage1: S1.Stage1Config = dataclasses.field(default_factory=S1.Stage1Config)
    mgrpo: G.MgrpoConfig = dataclasses.field(default_factory=G.MgrpoConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"world": W.WorldConfig, "model": M.ModelConfig, "stage1": S1.Stage1Config,
            "mgrpo": G.MgrpoConfig, "eval": EvalConfig}


def _coerce(path: str, value, default):
    """Check ``value`` against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{path}: unsupported field type")


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}: unknown key (allowed: {', '.join(sorted(fields))})")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    return cls(**kwargs)


def parse_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig`; the global seed fills every sub-config seed
    not set explicitly, and ``seed_override`` replaces all of them."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    allowed = {"seed"} | set(SECTIONS)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key (allowed: {', '.join(sorted(allowed))})")
    seed = _coerce("seed", raw.get("seed", 0), 0)
    if seed_override is not None:
        seed = seed_override
    parts = {}
    for name, cls in SECTIONS.items():
        section = dict(raw.get(name, {})) if isinstance(raw.get(name, {}), dict) else raw[name]
        if isinstance(section, dict) and "seed" in {f.name for f in dataclasses.fields(cls)}:
            if seed_override is not None or "seed" not in section:
                section["seed"] = seed
        parts[name] = _section(name, cls, section)
    cfg = RunConfig(seed=seed, **parts)
    checks = [("world", cfg.world.validate), ("model", cfg.model.validate),
              ("stage1", cfg.stage1.validate), ("mgrpo", cfg.mgrpo.validate)]
    for name, check in checks:
        try:
            check()
        except (ValueError, W.SchemaError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    if cfg.model.d_v != cfg.world.d_v or cfg.model.d_e != cfg.world.d_e:
        raise ConfigError(f"model: d_v/d_e ({cfg.model.d_v}/{cfg.model.d_e}) must match the world "
                          f"({cfg.world.d_v}/{cfg.world.d_e})")
    if (cfg.model.grid_h, cfg.model.grid_w) != (cfg.world.grid_h, cfg.world.grid_w):
        raise ConfigError("model: grid must match world grid")
    for name in cfg.eval.specs:
        try:
            E.ablation_by_name(name)
        except KeyError as exc:
            raise ConfigError(f"eval.specs: {exc.args[0]}") from exc
    return cfg


def load_config(path, seed_override: int | None = None) -> RunConfig:
    if path is None:
        return parse_config({}, seed_override)
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: invalid UTF-8 at byte offset {exc.start}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ConfigError(f"{path}: malformed JSON at byte offset {offset} "
                          f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    return parse_config(raw, seed_override)


# -- helpers ---------------------------------------------------------------------------

def _guard(paths, overwrite: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not overwrite:
        raise ConfigError(f"refusing to overwrite {existing[0]} (pass --overwrite)")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_run_meta(out: Path, name: str, cfg: RunConfig, args) -> None:
    meta = {"command": args.command, "version": __version__, "config": cfg.to_dict(),
            "seed_override": args.seed}
    _write_text(out / f"{name}.run.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _load_data_vocab(data: Path) -> None:
    vocab_path = data / "vocab.json"
    if not vocab_path.exists():
        raise StageOrderError(f"{vocab_path} missing; run `slvr gen-data --out {data}` first")
    vocab = W.load_vocab(vocab_path)
    tokens = vocab.get("tokens", vocab) if isinstance(vocab, dict) else vocab
    if list(tokens) != list(W.VOCAB):
        raise E.CompatibilityError(f"dataset vocabulary in {vocab_path} does not match this build")


def _split(data: Path, name: str) -> Path:
    p = data / f"{name}.jsonl"
    if not p.exists():
        raise StageOrderError(f"{p} missing; run `slvr gen-data --out {data}` first")
    return p


def _read_metrics(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    rows = []
    for rec in csv.DictReader(io.StringIO(path.read_text())):
        if int(rec["step"]) > upto:
            break
        row = {}
        for k, v in rec.items():
            if v == "":
                continue
            row[k] = int(v) if k in ("step", "wallclock_ms") else float(v)
        rows.append(row)
    return rows


def _load_stage_ckpt(path: Path, stage: int, hint: str):
    if not path.exists():
        raise StageOrderError(f"stage-{stage} checkpoint {path} not found; {hint}")
    arrays, extra, meta = M.load_checkpoint(path)
    if meta.get("stage") != stage:
        raise StageOrderError(f"{path} is a stage-{meta.get('stage')} checkpoint, expected stage {stage}; {hint}")
    E.check_vocab(meta, W.VOCAB)
    return arrays, extra, meta


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    names = ("train_stage1.jsonl", "train_stage2.jsonl", "svqa_eval.jsonl", "vocab.json")
    _guard([out / n for n in names], args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    paths = W.emit_dataset(cfg.world, out)
    _write_run_meta(out, "gen-data", cfg, args)
    for split in ("train_stage1", "train_stage2", "svqa_eval"):
        n = sum(1 for line in paths[split].read_text().splitlines() if line.strip())
        print(f"{split}: {n} samples -> {paths[split]}")
    return EXIT_OK


def cmd_train_stage1(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    _load_data_vocab(data)
    ckpt, metrics_path = out / "stage1.ckpt", out / "stage1_metrics.csv"
    _guard([ckpt, metrics_path], args.overwrite or bool(args.init))
    samples = W.load_region_samples(_split(data, "train_stage1"))
    prepared = S1.prepare(samples, cfg.world, cfg.model)
    init, opt, start, prior = None, None, 0, []
    if args.init:
        init_path = Path(args.init)
        init, extra, meta = _load_stage_ckpt(init_path, 1, "resume needs a stage-1 checkpoint")
        if M.config_from_meta(meta) != cfg.model:
            raise E.CompatibilityError(f"{init_path} was trained with a different model config")
        start = int(meta.get("step", 0))
        opt = Adam(cfg.stage1.lr)
        opt.load_state_arrays(extra)
        prior = _read_metrics(init_path.parent / "stage1_metrics.csv", start)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"vocab": list(W.VOCAB), "seed_override": args.seed}
    res = S1.train_stage1(cfg.stage1, prepared, cfg.model, init=init, optimizer=opt, start_step=start,
                          checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every, meta=meta,
                          stop_step=args.stop_step)
    _write_text(metrics_path, S1.metrics_csv(prior + res.metrics))
    _write_run_meta(out, "train-stage1", cfg, args)
    last = res.metrics[-1] if res.metrics else {}
    print(f"stage-1 done at step {res.step}: loss_total={last.get('loss_total', float('nan')):.4f} -> {ckpt}")
    return EXIT_OK


def cmd_extract_anchors(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    _load_data_vocab(data)
    ckpt = Path(args.ckpt) if args.ckpt else out / "stage1.ckpt"
    arrays, _, meta = _load_stage_ckpt(ckpt, 1, "run `slvr train-stage1` first")
    if not meta.get("complete"):
        raise StageOrderError(f"{ckpt} is an incomplete stage-1 checkpoint; finish stage 1 (resume with --init)")
    anchors_path = out / "anchors.slvr"
    _guard([anchors_path], args.overwrite)
    samples = W.load_multiquery_samples(_split(data, "train_stage2"))
    store = S1.extract_anchors(arrays, meta, samples, cfg.world, cfg.stage1.anchor_query)
    out.mkdir(parents=True, exist_ok=True)
    store.save(anchors_path)
    _write_run_meta(out, "extract-anchors", cfg, args)
    print(f"{len(store)} anchors -> {anchors_path}")
    return EXIT_OK


def cmd_train_stage2(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    _load_data_vocab(data)
    s1_path = Path(args.ckpt) if args.ckpt else out / "stage1.ckpt"
    s1_arrays, _, s1_meta = _load_stage_ckpt(s1_path, 1, "run `slvr train-stage1` first")
    if not s1_meta.get("complete"):
        raise StageOrderError(f"{s1_path} is an incomplete stage-1 checkpoint; finish stage 1 first")
    anchors_path = Path(args.anchors) if args.anchors else out / "anchors.slvr"
    if not anchors_path.exists():
        raise StageOrderError(f"anchors {anchors_path} not found; run `slvr extract-anchors` first")
    anchors = S1.AnchorStore.load(anchors_path)
    ckpt, metrics_path = out / "stage2.ckpt", out / "stage2_metrics.csv"
    _guard([ckpt, metrics_path], args.overwrite or bool(args.init))
    samples = W.load_multiquery_samples(_split(data, "train_stage2"))
    eval_samples = W.load_multiquery_samples(_split(data, "svqa_eval"))
    init, opt, start, prior = s1_arrays, None, 0, []
    if args.init:
        init_path = Path(args.init)
        init, extra, meta = _load_stage_ckpt(init_path, 2, "resume needs a stage-2 checkpoint")
        start = int(meta.get("step", 0))
        opt = Adam(cfg.mgrpo.lr)
        opt.load_state_arrays(extra)
        prior = _read_metrics(init_path.parent / "stage2_metrics.csv", start)
    out.mkdir(parents=True, exist_ok=True)

    def save(arrays, optimizer, step, complete):
        meta = {"stage": 2, "complete": complete, "step": step, "seed": cfg.mgrpo.seed,
                "model_config": s1_meta["model_config"], "mgrpo_config": dataclasses.asdict(cfg.mgrpo),
                "vocab": list(W.VOCAB), "seed_override": args.seed, "stage1_checkpoint": str(s1_path)}
        M.save_checkpoint(ckpt, arrays, meta, extra=optimizer.state_arrays())

    res = G.train_stage2(cfg.mgrpo, samples, cfg.world, init, s1_meta, anchors, eval_samples=eval_samples,
                         optimizer=opt, start_step=start, ref_arrays=s1_arrays, checkpoint_fn=save,
                         checkpoint_every=args.checkpoint_every, stop_step=args.stop_step)
    _write_text(metrics_path, S1.metrics_csv(prior + res.metrics, columns=G.METRIC_COLUMNS))
    _write_run_meta(out, "train-stage2", cfg, args)
    last = res.metrics[-1] if res.metrics else {}
    print(f"stage-2 done at step {res.step}: mean_r_ans={last.get('mean_r_ans', float('nan')):.3f} -> {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    _load_data_vocab(data)
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise StageOrderError(f"checkpoint {ckpt} not found; train a model first")
    arrays, _, meta = M.load_checkpoint(ckpt)
    E.check_vocab(meta, W.VOCAB)
    samples = W.load_multiquery_samples(_split(data, "svqa_eval"))
    eval_csv, summary = out / "eval.csv", out / "eval_summary.csv"
    _guard([eval_csv, summary], args.overwrite)
    result = E.evaluate(arrays, M.config_from_meta(meta), samples, cfg.world)
    row = E.AblationRow(ckpt.stem, [E.AblationCell(ckpt.stem, int(meta.get("seed", cfg.seed)), result)])
    _write_text(eval_csv, result.to_csv())
    _write_text(summary, E.summary_csv([row]))
    print(E.text_table([row]), end="")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    _load_data_vocab(data)
    names = [n.strip() for n in args.grid.split(",")] if args.grid else list(cfg.eval.specs)
    try:
        specs = [E.ablation_by_name(n) for n in names if n]
    except KeyError as exc:
        raise ConfigError(f"--grid: {exc.args[0]}") from exc
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.eval.seeds)
    _guard([out / "summary.txt", out / "summary.csv", out / "summary.svg"], args.overwrite)
    split_data = {"stage1": W.load_region_samples(_split(data, "train_stage1")),
                  "stage2": W.load_multiquery_samples(_split(data, "train_stage2")),
                  "eval": W.load_multiquery_samples(_split(data, "svqa_eval"))}
    rows = E.run_ablation_grid(specs, cfg.world, cfg.model, cfg.stage1, cfg.mgrpo, seeds, data=split_data)
    E.emit_report(rows, out, svg=cfg.eval.svg)
    _write_run_meta(out, "ablate", cfg, args)
    print(E.text_table(rows), end="")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train-stage1": cmd_train_stage1, "extract-anchors": cmd_extract_anchors,
            "train-stage2": cmd_train_stage2, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slvr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"slvr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the global seed everywhere")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        if data:
            p.add_argument("--data", required=True, help="dataset directory from gen-data")

    common(sub.add_parser("gen-data", help="generate the synthetic dataset"), data=False)
    p = sub.add_parser("train-stage1", help="supervised latent training")
    common(p)
    p.add_argument("--init", help="resume from a stage-1 checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--stop-step", type=int, help="interrupt after this step (resume later with --init)")
    p = sub.add_parser("extract-anchors", help="store stage-1 latents per stage-2 region")
    common(p)
    p.add_argument("--ckpt", help="stage-1 checkpoint (default: OUT/stage1.ckpt)")
    p = sub.add_parser("train-stage2", help="multi-query GRPO training")
    common(p)
    p.add_argument("--ckpt", help="stage-1 checkpoint (default: OUT/stage1.ckpt)")
    p.add_argument("--anchors", help="anchor file (default: OUT/anchors.slvr)")
    p.add_argument("--init", help="resume from a stage-2 checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--stop-step", type=int, help="interrupt after this step (resume later with --init)")
    p = sub.add_parser("eval", help="paired-question evaluation of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    common(p)
    p.add_argument("--grid", help="comma-separated ablation names (default: eval.specs)")
    p.add_argument("--seeds", help="comma-separated seeds (default: eval.seeds)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, S1.ConfigurationError, W.SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"stage order error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (E.CompatibilityError, FormatError) as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
