"""``rvqmark`` command line: simulate, confusion, cluster, embed, attack, detect,
report, theory.

Every command is a pure function of its inputs, the config and the seed, so
reruns reproduce outputs byte for byte. Exit codes: 0 success, 1 I/O failure,
2 configuration error, 3 data-format error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .channel import apply_channel, attack
from .community import cluster_confusion, read_cluster_maps_csv, write_cluster_maps_csv
from .config import ExperimentConfig, detection_fingerprint
from .core import identity_maps
from .detect import detect, read_reports_csv, tpr_at_fpr, write_reports_csv
from .errors import ConfigurationError, DataFormatError, ShapeError
from .graph import build_confusion, read_confusion_csv, write_confusion_csv
from .io import read_stream, write_stream
from .simgen import SyntheticModel, generate
from .theory import expected_z

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# helpers

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_manifest(directory: Path, command: str, cfg: ExperimentConfig, detection=None, **extra):
    doc = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.fingerprint(),
    }
    if detection is not None:
        doc["detection"] = detection
    doc.update(extra)
    _write(directory / MANIFEST, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_manifest(directory: Path):
    path = directory / MANIFEST
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable manifest: {exc}", str(path)) from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"{path}: manifest format version {doc.get('format_version')!r} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    return doc


def _load_maps(args, cfg: ExperimentConfig):
    if not args.maps:
        return identity_maps(cfg.vocab_sizes)
    maps = read_cluster_maps_csv(args.maps)
    vocab = tuple(m.vocab_size for m in maps)
    if vocab != tuple(cfg.vocab_sizes):
        raise ConfigurationError(f"cluster maps cover vocabularies {list(vocab)}, config has {list(cfg.vocab_sizes)}")
    cfg.watermark().validate_for(cfg.vocab_sizes, maps)
    return maps


def _stream_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise DataFormatError("not a directory of token streams", str(d))
    return sorted(d.glob("*.tok"))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# trial jobs (top level so a process pool can pickle them)

def _embed_job(job):
    cfg, maps, t, delta = job
    model = SyntheticModel(cfg.vocab_sizes, cfg.entropy_scale, ex.derive_seed(cfg.seed, ex.MODEL, t))
    return generate(model, cfg.watermark(delta), maps, cfg.n, ex.derive_seed(cfg.seed, ex.GENERATION, t))


def _received(cfg, stream, t, channels):
    y = apply_channel(stream, channels, ex.derive_seed(cfg.seed, ex.CHANNEL, t))
    spec = cfg.attack_spec()
    return y if spec is None else attack(y, spec, ex.derive_seed(cfg.seed, ex.ATTACK, t))


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg):
    """Capture pairs plus received H0 (unbiased) and H1 (watermarked) streams."""
    out = _out(args)
    maps = _load_maps(args, cfg)
    channels = cfg.channel_models()
    fp = detection_fingerprint(cfg.watermark(), maps)

    (out / "pairs").mkdir(parents=True, exist_ok=True)
    for t, (x, y) in enumerate(ex.capture_pairs(channels, cfg.vocab_sizes, cfg.pairs, cfg.n, cfg.seed)):
        write_stream(out / "pairs" / f"pair_{t:05d}.orig.tok", x)
        write_stream(out / "pairs" / f"pair_{t:05d}.retok.tok", y)

    rows = []
    for name, delta in (("h0", 0.0), ("h1", None)):
        (out / name).mkdir(parents=True, exist_ok=True)
        jobs = [(cfg, maps, t, delta) for t in range(cfg.trials)]
        for t, trace in enumerate(ex.run_trials(_embed_job, jobs, cfg.workers)):
            write_stream(out / name / f"stream_{t:05d}.tok", _received(cfg, trace.stream, t, channels))
        _write_manifest(out / name, "simulate", cfg, fp, hypothesis=name)
    for t in range(cfg.trials):
        rows.append([
            t, f"h0/stream_{t:05d}.tok", f"h1/stream_{t:05d}.tok",
            ex.derive_seed(cfg.seed, ex.MODEL, t), ex.derive_seed(cfg.seed, ex.GENERATION, t),
            ex.derive_seed(cfg.seed, ex.CHANNEL, t),
        ])
    _write(out / "manifest.csv", _csv_text(
        ["trial", "h0_file", "h1_file", "model_seed", "generation_seed", "channel_seed"], rows))
    _write_manifest(out, "simulate", cfg, fp, pairs=cfg.pairs, trials=cfg.trials)
    return f"wrote {cfg.pairs} capture pairs and {cfg.trials} H0/H1 streams to {out}"


def cmd_confusion(args, cfg):
    files = sorted(Path(args.pairs_dir).glob("*.orig.tok")) if Path(args.pairs_dir).is_dir() else None
    if files is None:
        raise DataFormatError("not a directory of stream pairs", args.pairs_dir)
    pairs = []
    for f in files:
        partner = f.with_name(f.name[: -len(".orig.tok")] + ".retok.tok")
        if not partner.exists():
            raise DataFormatError("missing retokenized partner file", str(partner))
        pairs.append((read_stream(f), read_stream(partner)))
    vocab = pairs[0][0].vocab_sizes if pairs else cfg.vocab_sizes
    matrices = build_confusion(pairs, vocab) if pairs else []
    out = _out(args)
    write_confusion_csv(out / "confusion.csv", matrices)
    total = sum(m.total for m in matrices)
    return f"{len(pairs)} pairs, {total} confusions -> {out / 'confusion.csv'}"


def cmd_cluster(args, cfg):
    matrices = read_confusion_csv(args.confusion, cfg.vocab_sizes)
    rhos, ms = cfg.per_channel("rho"), cfg.per_channel("noise_threshold")
    maps = [
        cluster_confusion(m, rhos[c], ms[c], cfg.algorithm, ex.derive_seed(cfg.seed, ex.CLUSTER, c))
        for c, m in enumerate(matrices)
    ]
    out = _out(args)
    write_cluster_maps_csv(out / "maps.csv", maps)
    rows = [[m.channel, m.vocab_size, m.cluster_count, rhos[c], ms[c], cfg.algorithm] for c, m in enumerate(maps)]
    _write(out / "clusters.csv", _csv_text(["channel", "vocab_size", "clusters", "rho", "noise_threshold",
                                            "algorithm"], rows))
    return "\n".join(f"channel {r[0]}: {r[2]} clusters over {r[1]} tokens" for r in rows)


def cmd_embed(args, cfg):
    out = _out(args)
    maps = _load_maps(args, cfg)
    jobs = [(cfg, maps, t, None) for t in range(cfg.trials)]
    rows = []
    for t, trace in enumerate(ex.run_trials(_embed_job, jobs, cfg.workers)):
        name = f"stream_{t:05d}.tok"
        write_stream(out / name, trace.stream)
        marked = list(cfg.watermarked_channels)
        live = ~trace.deferred_flags[:, marked]
        green = int((trace.green_flags[:, marked] & live).sum())
        rows.append([t, name, ex.derive_seed(cfg.seed, ex.MODEL, t), ex.derive_seed(cfg.seed, ex.GENERATION, t),
                     green, int(live.sum())])
    _write(out / "manifest.csv", _csv_text(
        ["trial", "file", "model_seed", "generation_seed", "green", "biased_steps"], rows))
    _write_manifest(out, "embed", cfg, detection_fingerprint(cfg.watermark(), maps), trials=cfg.trials)
    return f"embedded {cfg.trials} streams into {out}"


def cmd_attack(args, cfg):
    src = Path(args.streams)
    files = _stream_files(src)
    upstream = _read_manifest(src)
    channels = cfg.channel_models() if args.retokenize else [None] * len(cfg.vocab_sizes)
    out = _out(args)
    spec = cfg.attack_spec()
    for t, f in enumerate(files):
        x = read_stream(f)
        y = apply_channel(x, channels[: x.channels], ex.derive_seed(cfg.seed, ex.CHANNEL, t)) \
            if args.retokenize else x
        if spec is not None:
            y = attack(y, spec, ex.derive_seed(cfg.seed, ex.ATTACK, t))
        write_stream(out / f.name, y)
    det = upstream.get("detection") if upstream else None
    _write_manifest(out, "attack", cfg, det, attack=cfg.attack, retokenize=bool(args.retokenize),
                    source=src.name)
    return f"attacked {len(files)} streams ({cfg.attack}, retokenize={bool(args.retokenize)}) -> {out}"


def cmd_detect(args, cfg):
    src = Path(args.streams)
    files = _stream_files(src)
    maps = _load_maps(args, cfg)
    wm = cfg.watermark()
    mine = detection_fingerprint(wm, maps)
    upstream = _read_manifest(src)
    if upstream and "detection" in upstream:
        theirs = upstream["detection"]
        diff = sorted(k for k in set(mine) | set(theirs) if mine.get(k) != theirs.get(k))
        if diff:
            raise ConfigurationError(
                f"detection config does not match the embedding manifest {src / MANIFEST}: "
                f"differs in {', '.join(diff)}"
            )
    reports = []
    for f in files:
        y = read_stream(f)
        if y.vocab_sizes != tuple(cfg.vocab_sizes):
            raise DataFormatError(f"stream vocabularies {list(y.vocab_sizes)} differ from config "
                                  f"{list(cfg.vocab_sizes)}", str(f))
        reports.append(detect(y, wm, maps, stream_id=f.stem))
    out = _out(args)
    buf = io.StringIO()
    write_reports_csv(buf, reports)
    _write(out / "report.csv", buf.getvalue())
    _write(out / "summary.txt", "".join(r.summary() + "\n" for r in reports))
    return f"detected {len(reports)} streams -> {out / 'report.csv'}"


def _summary_row(name, p, nl):
    if len(p) == 0:
        return [name, 0, "nan", "nan"]
    return [name, len(p), repr(float(np.median(p))), repr(float(np.mean(nl)))]


def cmd_report(args, cfg):
    _, _, p0, nl0 = read_reports_csv(args.h0)
    _, _, p1, nl1 = read_reports_csv(args.h1)
    if len(p1) == 0:
        raise DataFormatError("H1 report has no rows", args.h1)
    rows = []
    for f in sorted(set(cfg.fpr)):
        emp = repr(float((p0 <= f).mean())) if len(p0) else "nan"
        rows.append([repr(float(f)), repr(tpr_at_fpr(p1, f)), emp])
    out = _out(args)
    _write(out / "tpr.csv", _csv_text(["fpr", "tpr", "empirical_fpr"], rows))
    _write(out / "summary.csv", _csv_text(["set", "count", "median_p", "mean_neglog10p"],
                                          [_summary_row("h0", p0, nl0), _summary_row("h1", p1, nl1)]))
    return "\n".join(f"TPR@{r[0]} = {r[1]}" for r in rows)


THEORY_HEADER = ["row", "gamma", "h", "g", "r", "predicted", "empirical", "se", "within_3se", "pearson"]


def _read_measured(path, n):
    """Measured cells (CSV columns gamma,h,g,r,empirical,se); predictions use ``n`` steps."""
    want = ["gamma", "h", "g", "r", "empirical", "se"]
    try:
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
    except OSError as exc:
        raise DataFormatError(f"cannot read: {exc.strerror}", path) from None
    if not lines or [c.strip() for c in lines[0]] != want:
        raise DataFormatError(f"expected header {','.join(want)}", path, 1)
    cells = []
    for lineno, row in enumerate(lines[1:], start=2):
        if not row:
            continue
        try:
            gm, h, g, r, emp, se = (float(v) for v in row)
        except ValueError:
            raise DataFormatError(f"expected {len(want)} numeric fields", path, lineno) from None
        if h != int(h) or h < 0 or not 0 < gm < 1 or not 0 <= r <= 1:
            raise DataFormatError("need integer h >= 0, gamma in (0, 1), r in [0, 1]", path, lineno)
        cells.append(ex.TheoryCell(gm, int(h), g, r, expected_z(n, gm, g, r, int(h)), emp, se))
    return cells


def cmd_theory(args, cfg):
    if args.measured:
        cells = _read_measured(args.measured, cfg.n)
        corr = ex.row_correlations(cells)
    else:
        cells, corr = ex.theory_grid(
            cfg.gammas, cfg.hs, r=cfg.r, trials=cfg.trials, n=cfg.n, vocab=cfg.vocab_sizes[0],
            delta=cfg.delta, entropy_scale=cfg.entropy_scale, seed=cfg.seed, workers=cfg.workers,
            key=cfg.watermark().key,
        )
    rows = [["cell", repr(c.gamma), c.h, repr(c.g), repr(c.r), repr(c.predicted), repr(c.empirical),
             repr(c.se), int(c.within_3se), ""] for c in cells]
    rows += [["correlation", "", h, "", "", "", "", "", "", repr(v)] for h, v in sorted(corr.items())]
    out = _out(args)
    _write(out / "theory.csv", _csv_text(THEORY_HEADER, rows))
    ok = sum(c.within_3se for c in cells)
    lines = [f"{ok}/{len(cells)} cells within 3 SE"]
    lines += [f"h={h}: pearson {v:.4f}" if math.isfinite(v) else f"h={h}: pearson undefined"
              for h, v in sorted(corr.items())]
    return "\n".join(lines)


COMMANDS = {
    "simulate": cmd_simulate, "confusion": cmd_confusion, "cluster": cmd_cluster, "embed": cmd_embed,
    "attack": cmd_attack, "detect": cmd_detect, "report": cmd_report, "theory": cmd_theory,
}


# ---------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value experiment config")
    common.add_argument("--seed", metavar="U64", help="master seed (overrides config)")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--channels", metavar="LIST", help="watermarked channels, e.g. 0,1,2")
    common.add_argument("--rho", metavar="LIST", help="modularity resolution, one value or one per channel")
    common.add_argument("--noise-threshold", metavar="LIST", help="minimum confusion count m per channel")
    common.add_argument("--algorithm", choices=("leiden", "louvain", "identity"))
    common.add_argument("--fpr", metavar="LIST", help="target false-positive rates")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override any config key (repeatable)")

    parser = argparse.ArgumentParser(prog="rvqmark", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="capture pairs plus H0/H1 received streams")
    p.add_argument("--maps", metavar="CSV", help="cluster maps for watermarking (default: identity)")
    p = sub.add_parser("confusion", parents=[common], help="confusion CSV from *.orig.tok/*.retok.tok pairs")
    p.add_argument("pairs_dir")
    p = sub.add_parser("cluster", parents=[common], help="cluster maps from a confusion CSV")
    p.add_argument("confusion")
    p = sub.add_parser("embed", parents=[common], help="generate watermarked streams")
    p.add_argument("--maps", metavar="CSV")
    p = sub.add_parser("attack", parents=[common], help="apply retokenization and/or the configured attack")
    p.add_argument("streams")
    p.add_argument("--retokenize", action="store_true", help="pass through the planted channel first")
    p = sub.add_parser("detect", parents=[common], help="per-stream detection report")
    p.add_argument("streams")
    p.add_argument("--maps", metavar="CSV")
    p = sub.add_parser("report", parents=[common], help="TPR at FPR table and p-value summary")
    p.add_argument("h0")
    p.add_argument("h1")
    p = sub.add_parser("theory", parents=[common], help="predicted vs empirical z table")
    p.add_argument("--measured", metavar="CSV", help="measured cells (gamma,h,g,r,empirical,se); skips simulation")
    return parser


def resolve_config(args) -> ExperimentConfig:
    base = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    items = []
    for text in args.set:
        if "=" not in text:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {text!r}")
        k, v = text.split("=", 1)
        items.append((k.strip(), v.strip(), None))
    flags = {"seed": args.seed, "channels": args.channels, "rho": args.rho,
             "noise_threshold": args.noise_threshold, "algorithm": args.algorithm, "fpr": args.fpr}
    items += [(k, v, None) for k, v in flags.items() if v is not None]
    return ExperimentConfig.from_items(items, base, origin="command line")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        message = COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"rvqmark: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, ShapeError) as exc:
        print(f"rvqmark: data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"rvqmark: I/O error: {exc}", file=sys.stderr)
        return 1
    if message:
        print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
