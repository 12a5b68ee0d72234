"""Command-line front door: generate benchmarks, run experiments, evaluate
checkpoints, estimate category counts, and run ablation sweeps.

Exit codes: 0 success, 2 usage/configuration, 3 data, 4 internal.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .config import _parse_value, format_config, load_config, parse_config
from .core import (
    CategoryRegistry,
    ConfigurationError,
    DataError,
    EmbeddingMatrix,
    IgcdError,
    PROVENANCE_LABELED,
    RunConfig,
    StageDataset,
)
from .discovery import estimate_category_count, select_peaks
from .engine import load_checkpoint, run_benchmark, save_checkpoint
from .evaluate import final_discovery, reports_to_csv, reports_to_text
from .ingest import (
    SyntheticSpec,
    generate_benchmark,
    read_embeddings_binary,
    read_embeddings_text,
    write_embeddings_binary,
)
from .losses import MODE_IGCD_L, MODE_IGCD_U

_MODE_BY_FLAG = {"igcd-l": MODE_IGCD_L, "igcd-u": MODE_IGCD_U}


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _load_run_config(args) -> RunConfig:
    overrides = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if args.config:
        config = load_config(args.config, RunConfig, overrides)
    else:
        config = parse_config("", RunConfig, overrides)
    config.validate()
    return config


def write_benchmark(out_dir: Path, spec: SyntheticSpec) -> None:
    matrix, stages, registry = generate_benchmark(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "benchmark_version = 1",
        f"n_stages = {spec.n_stages}",
        f"dim = {spec.dim}",
        f"seed = {spec.seed}",
    ]
    first_seen: dict[int, int] = {}
    for cid, (stage, _) in sorted(registry.origin.items()):
        first_seen.setdefault(cid, stage)
    for stage in stages:
        t = stage.stage
        cats = sorted(stage.labeled_categories | stage.unlabeled_categories)
        new_cats = sorted(c for c in cats if first_seen[c] == t)
        if t == 0:
            rows = [i for i, _ in stage.labeled]
            labels = [c for _, c in stage.labeled]
            name = f"stage{t}_labeled.bin"
            write_embeddings_binary(out_dir / name, EmbeddingMatrix(matrix.rows(rows)), labels)
            lines += [f"stage{t}_labeled = {name}", f"stage{t}_labeled_count = {len(rows)}"]
        else:
            rows = list(stage.unlabeled)
            labels = [stage.ground_truth[i] for i in rows]
            name = f"stage{t}_unlabeled.bin"
            write_embeddings_binary(out_dir / name, EmbeddingMatrix(matrix.rows(rows)), labels)
            lines += [f"stage{t}_unlabeled = {name}", f"stage{t}_unlabeled_count = {len(rows)}"]
        if stage.heldout:
            rows = sorted(stage.heldout)
            labels = [stage.heldout[i] for i in rows]
            name = f"stage{t}_heldout.bin"
            write_embeddings_binary(out_dir / name, EmbeddingMatrix(matrix.rows(rows)), labels)
            lines += [f"stage{t}_heldout = {name}", f"stage{t}_heldout_count = {len(rows)}"]
        lines.append(f"stage{t}_categories = " + ",".join(str(c) for c in cats))
        lines.append(f"stage{t}_new_categories = " + ",".join(str(c) for c in new_cats))
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_benchmark(bench_dir: Path):
    manifest = bench_dir / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"missing manifest: {manifest}")
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{manifest}:{lineno}: malformed line {raw!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        n_stages = int(fields["n_stages"])
        dim = int(fields["dim"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{manifest}: missing or malformed n_stages/dim") from exc

    def ints(key: str) -> list[int]:
        text = fields.get(key, "")
        return [int(v) for v in text.split(",") if v != ""]

    registry = CategoryRegistry()
    blocks: list[np.ndarray] = []
    stages: list[StageDataset] = []
    cursor = 0
    for t in range(n_stages):
        new_cats = ints(f"stage{t}_new_categories")
        if new_cats:
            issued = registry.register(len(new_cats), PROVENANCE_LABELED, t)
            if issued != new_cats:
                raise DataError(f"{manifest}: stage {t} category ids are not dense")
        role = "labeled" if t == 0 else "unlabeled"
        name = fields.get(f"stage{t}_{role}")
        if name is None:
            raise DataError(f"{manifest}: stage {t} lacks a {role} file entry")
        part, labels = read_embeddings_binary(bench_dir / name)
        if part.d != dim:
            raise DataError(f"{bench_dir / name}: dimension {part.d} != manifest dim {dim}")
        if labels is None:
            raise DataError(f"{bench_dir / name}: stage files must carry labels")
        idx = list(range(cursor, cursor + part.n))
        cursor += part.n
        blocks.append(part.data)
        heldout: dict[int, int] = {}
        name_h = fields.get(f"stage{t}_heldout")
        if name_h:
            part_h, labels_h = read_embeddings_binary(bench_dir / name_h)
            if labels_h is None:
                raise DataError(f"{bench_dir / name_h}: heldout files must carry labels")
            for j in range(part_h.n):
                heldout[cursor + j] = int(labels_h[j])
            cursor += part_h.n
            blocks.append(part_h.data)
        if t == 0:
            stages.append(StageDataset(stage=0,
                                       labeled=tuple((i, int(c)) for i, c in zip(idx, labels)),
                                       unlabeled=(), ground_truth={}, heldout=heldout))
        else:
            stages.append(StageDataset(stage=t, labeled=(), unlabeled=tuple(idx),
                                       ground_truth={i: int(c) for i, c in zip(idx, labels)},
                                       heldout=heldout))
    matrix = EmbeddingMatrix(np.vstack(blocks))
    return matrix, stages, registry


def cmd_gen(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.spec:
        spec = load_config(args.spec, SyntheticSpec, overrides)
    else:
        spec = parse_config("", SyntheticSpec, overrides)
    write_benchmark(Path(args.out), spec)
    print(f"benchmark written to {args.out}")
    return 0


def _read_any_embeddings(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"IGCD":
        return read_embeddings_binary(path)
    return read_embeddings_text(path)


def cmd_run(args) -> int:
    config = _load_run_config(args)
    matrix, stages, registry = load_benchmark(Path(args.bench))
    mode = _MODE_BY_FLAG[args.mode]
    state, reports, m_f, m_d = run_benchmark(matrix, stages, registry, config, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "reports.txt").write_text(reports_to_text(reports), encoding="utf-8")
    (out / "summary.csv").write_text(reports_to_csv(reports, m_f, m_d), encoding="utf-8")
    (out / "config.txt").write_text(format_config(config), encoding="utf-8")
    save_checkpoint(state, config, out / "checkpoint.bin")
    if m_f is not None:
        print(f"m_f={m_f:.6f} m_d={m_d:.6f}")
    else:
        print(f"m_d={m_d:.6f}")
    return 0


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    matrix, stages, registry = load_benchmark(Path(args.bench))
    state = load_checkpoint(Path(args.checkpoint), matrix, config)
    idx = np.concatenate([np.array(r.eval_indices, dtype=np.int64) for r in state.history])
    truth = np.concatenate([np.array(r.eval_truth, dtype=np.int64) for r in state.history])
    from .engine import _predict_rows

    m_d = final_discovery(_predict_rows(state, config, idx), truth)
    lines = [f"stage={state.stage}", f"categories={state.registry.next_id}", f"m_d={m_d:.6f}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_estimate_k(args) -> int:
    config = _load_run_config(args)
    matrix, _ = _read_any_embeddings(Path(args.embeddings))
    peaks = select_peaks(matrix, config)
    print(len(peaks))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        body = "\n".join(str(i) for i in peaks.indices)
        (out / "peaks.txt").write_text(body + ("\n" if body else ""), encoding="utf-8")
    return 0


_ABLATE_PARAMS = ("support_per_category", "replay_per_category", "k_density",
                  "k_iou", "iou_threshold")


def cmd_ablate(args) -> int:
    if args.parameter not in _ABLATE_PARAMS:
        raise ConfigurationError(
            f"parameter must be one of {', '.join(_ABLATE_PARAMS)}, got {args.parameter!r}")
    raw_values = [v for v in (args.values or "").split(",") if v != ""]
    if not raw_values:
        raise ConfigurationError("ablate needs a non-empty comma-separated --values list")
    config = _load_run_config(args)
    hints = get_type_hints(RunConfig)
    values = [_parse_value(v, hints[args.parameter]) for v in raw_values]
    mode = _MODE_BY_FLAG[args.mode]
    rows = [f"{args.parameter},m_f,m_d"]
    results = []
    for value in values:
        cfg = replace(config, **{args.parameter: value})
        cfg.validate()
        matrix, stages, registry = load_benchmark(Path(args.bench))
        _, _, m_f, m_d = run_benchmark(matrix, stages, registry, cfg, mode)
        m_f_text = "" if m_f is None else f"{m_f:.6f}"
        rows.append(f"{value},{m_f_text},{m_d:.6f}")
        results.append((value, m_f, m_d))
    table = "\n".join(rows) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablate.csv").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="igcd",
                                     description="incremental generalized category discovery on embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_needed=True):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")

    p_gen = sub.add_parser("gen", help="generate a synthetic benchmark")
    p_gen.add_argument("--spec", default=None, help="synthetic spec file (flat key = value)")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run a full multi-stage experiment")
    common(p_run)
    p_run.add_argument("--bench", required=True)
    p_run.add_argument("--mode", choices=sorted(_MODE_BY_FLAG), default="igcd-l")
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--bench", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_est = sub.add_parser("estimate-k", help="estimate the category count of an embedding file")
    common(p_est)
    p_est.add_argument("--embeddings", required=True)
    p_est.add_argument("--out", default=None)
    p_est.set_defaults(func=cmd_estimate_k)

    p_abl = sub.add_parser("ablate", help="sweep one parameter over a list of values")
    common(p_abl)
    p_abl.add_argument("--bench", required=True)
    p_abl.add_argument("--mode", choices=sorted(_MODE_BY_FLAG), default="igcd-l")
    p_abl.add_argument("--parameter", required=True)
    p_abl.add_argument("--values", required=True, help="comma-separated values")
    p_abl.add_argument("--out", default=None)
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except IgcdError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
