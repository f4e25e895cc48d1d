"""Command-line entry point.

Subcommands: gen, annotate, partition, train, infer, eval, report, plot-data.
Every subcommand takes ``--config FILE`` (JSON) plus per-field overrides and
writes the effective configuration next to its outputs. Relative output paths
are placed under ``$WEAKSEG3D_OUTPUT_DIR`` when that variable is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from weakseg3d import evaluation
from weakseg3d.model import Hyperparams, forward, load_params, save_params
from weakseg3d.pipeline import (VERSIONS, EpochRecord, SupervoxelParams, TrainingRun, default_pseudo_config,
                                evaluate_run, expand_labels, fusion_config, infer_instances, inference_config,
                                fuse_semantics, train)
from weakseg3d.pointcloud import (SceneSpec, atomic_write_text, generate_scene, read_clicks, read_scene,
                                  simulate_clicks, write_clicks, write_scene)
from weakseg3d.suites import SUITES
from weakseg3d.supervoxel import write_partition

ENV_OUTPUT_DIR = "WEAKSEG3D_OUTPUT_DIR"
PSEUDO_METHODS = ("kmeans", "nearest")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClickSettings:
    m: int = 1
    seed: int = 0
    boundary_fraction: float | None = None
    background_clicks: int = 0


@dataclass(frozen=True)
class PseudoSettings:
    method: str = "kmeans"
    centroid_mode: str = "tuple"
    use_spatial: bool = True
    use_semantic: bool = True
    background_as_instances: bool = False

    def validate(self):
        if self.method not in PSEUDO_METHODS:
            raise ValueError(f"method must be one of {PSEUDO_METHODS}, got {self.method!r}")
        if self.centroid_mode not in ("tuple", "embedding"):
            raise ValueError(f"centroid_mode must be 'tuple' or 'embedding', got {self.centroid_mode!r}")


@dataclass(frozen=True)
class InferSettings:
    min_points: int = 1
    fuse: bool = True


SECTIONS = {
    "hyperparams": Hyperparams,
    "scene": SceneSpec,
    "supervoxel": SupervoxelParams,
    "clicks": ClickSettings,
    "pseudo": PseudoSettings,
    "infer": InferSettings,
}


@dataclass(frozen=True)
class RunConfig:
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    scene: SceneSpec = field(default_factory=SceneSpec)
    supervoxel: SupervoxelParams = field(default_factory=SupervoxelParams)
    clicks: ClickSettings = field(default_factory=ClickSettings)
    pseudo: PseudoSettings = field(default_factory=PseudoSettings)
    infer: InferSettings = field(default_factory=InferSettings)
    version: str = "click"

    def validate(self):
        if self.version not in VERSIONS:
            raise ConfigError(f"version: must be one of {VERSIONS}, got {self.version!r}")
        for name in SECTIONS:
            v = getattr(self, name)
            try:
                if hasattr(v, "validate"):
                    v.validate()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from None

    def to_dict(self) -> dict:
        d = {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}
        d["version"] = self.version
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        extra = set(d) - set(SECTIONS) - {"version"}
        if extra:
            raise ConfigError(f"unknown config section(s): {sorted(extra)}")
        kw = {}
        for name, klass in SECTIONS.items():
            kw[name] = _build(klass, name, d.get(name, {}))
        cfg = cls(**kw, version=d.get("version", "click"))
        cfg.validate()
        return cfg

    def with_overrides(self, overrides: dict[str, dict]) -> "RunConfig":
        d = self.to_dict()
        for section, values in overrides.items():
            if section == "version":
                d["version"] = values
            else:
                d[section].update(values)
        return RunConfig.from_dict(d)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(klass, section: str, values):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected an object")
    known = {f.name for f in dataclasses.fields(klass)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"{section}.{sorted(extra)[0]}: unknown field")
    try:
        return klass(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FileNotFoundError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# flags


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional(kind):
    def parse(text: str):
        return None if text.lower() == "none" else kind(text)
    return parse


def _flag_type(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, (int, float)):
        return type(default)
    if isinstance(default, tuple):
        return None
    if default is None:
        return None
    return str


# section -> (flag prefix, fields with the value type when the default is None or a tuple)
_FLAG_GROUPS = {
    "hyperparams": ("", {"baseline_period": _optional(int), "offset_switch": _optional(int)}),
    "supervoxel": ("sv-", {}),
    "scene": ("scene-", {"points_per_instance": int, "classes": str}),
    "clicks": ("click-", {"boundary_fraction": _optional(float)}),
    "pseudo": ("pseudo-", {}),
    "infer": ("infer-", {}),
}


def add_config_flags(parser: argparse.ArgumentParser, sections=tuple(SECTIONS)) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--version", dest="ov__version", choices=VERSIONS, help="training version")
    for section in sections:
        prefix, special = _FLAG_GROUPS[section]
        group = parser.add_argument_group(section)
        defaults = SECTIONS[section]()
        for f in dataclasses.fields(SECTIONS[section]):
            default = getattr(defaults, f.name)
            kind = special.get(f.name) or _flag_type(default)
            flag = "--" + prefix + f.name.replace("_", "-")
            dest = f"ov_{section}_{f.name}"
            if isinstance(default, tuple):
                group.add_argument(flag, dest=dest, type=kind, nargs="+", metavar="V",
                                   help=f"default {' '.join(map(str, default))}")
            else:
                group.add_argument(flag, dest=dest, type=kind, metavar="V", help=f"default {default}")


def collect_overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    for key, value in vars(args).items():
        if not key.startswith("ov_") or value is None:
            continue
        if key == "ov__version":
            out["version"] = value
            continue
        _, section, name = key.split("_", 2)
        if isinstance(value, list):
            value = list(value)
        out.setdefault(section, {})[name] = value
    return out


def effective_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(args.config) if args.config else (base or RunConfig())
    if args.config and base is not None:
        raise ConfigError("--config cannot be combined with a run directory's stored config")
    return cfg.with_overrides(collect_overrides(args))


# ---------------------------------------------------------------------------
# paths


def out_path(path) -> Path:
    p = Path(path)
    root = os.environ.get(ENV_OUTPUT_DIR)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def in_path(path) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    root = os.environ.get(ENV_OUTPUT_DIR)
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return p


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _dump_config(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, cfg.to_json())


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


# ---------------------------------------------------------------------------
# training run directories


RUN_FILES = ("params.txt", "train.log", "records.json", "config.json")


def save_run(run: TrainingRun, cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_params(run.params, directory / "params.txt")
    atomic_write_text(directory / "train.log", run.log_text())
    records = [{"epoch": r.epoch, "terms": r.terms, "pseudo_acc": r.pseudo_acc, "n_pseudo": r.n_pseudo}
               for r in run.records]
    atomic_write_text(directory / "records.json", json.dumps(records, indent=1, sort_keys=True) + "\n")
    _dump_config(cfg, directory / "config.json")


def load_run(directory) -> tuple[TrainingRun, RunConfig]:
    directory = in_path(directory)
    for name in RUN_FILES:
        _require(directory / name)
    cfg = load_config(directory / "config.json")
    hp = cfg.hyperparams
    params = load_params(directory / "params.txt", embed_dim=hp.embed_dim, hidden=hp.hidden)
    records = [EpochRecord(r["epoch"], r["terms"], r["pseudo_acc"], r["n_pseudo"])
               for r in json.loads((directory / "records.json").read_text())]
    return TrainingRun(cfg.version, records, params, cfg.to_dict()), cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    cfg = effective_config(args)
    if args.suite:
        suite = SUITES[args.suite]
        out = out_path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        scenes, clicks = suite.load(args.split)
        for i, (s, c) in enumerate(zip(scenes, clicks)):
            write_scene(s, out / f"scene_{i:02d}.cs")
            write_clicks(c, out / f"clicks_{i:02d}.txt")
        _dump_config(cfg, out / "config.json")
        return
    scene = generate_scene(cfg.scene)
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scene(scene, out)
    _dump_config(cfg, _sidecar(out))


def cmd_annotate(args) -> None:
    cfg = effective_config(args)
    scene = read_scene(_require(in_path(args.scene)))
    c = cfg.clicks
    clicks = simulate_clicks(scene, c.m, c.seed, c.boundary_fraction, c.background_clicks)
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_clicks(clicks, out)
    _dump_config(cfg, _sidecar(out))


def cmd_partition(args) -> None:
    cfg = effective_config(args)
    scene = read_scene(_require(in_path(args.scene)))
    part = cfg.supervoxel.build(scene)
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_partition(part, out)
    if args.clicks:
        weak = expand_labels(part, read_clicks(_require(in_path(args.clicks))))
        rows = [f"{i} {a} {b}" for i, (a, b) in enumerate(zip(weak.instance.tolist(), weak.semantic.tolist()))]
        atomic_write_text(out.with_name(out.name + ".weak"), "\n".join(rows) + "\n")
    _dump_config(cfg, _sidecar(out))


def _load_scene_set(args):
    if args.suite:
        return SUITES[args.suite].load(args.split)
    if not args.scenes:
        raise ValueError("give --scenes (with --clicks) or --suite")
    scenes = [read_scene(_require(in_path(p))) for p in args.scenes]
    clicks = None
    if getattr(args, "clicks", None):
        if len(args.clicks) != len(scenes):
            raise ValueError(f"{len(scenes)} scene files but {len(args.clicks)} click files")
        clicks = [read_clicks(_require(in_path(p))) for p in args.clicks]
    return scenes, clicks


def cmd_train(args) -> None:
    cfg = effective_config(args)
    scenes, clicks = _load_scene_set(args)
    if clicks is None:
        raise ValueError("training needs --clicks")
    p = cfg.pseudo
    pseudo_cfg = default_pseudo_config(cfg.hyperparams, use_spatial=p.use_spatial, use_semantic=p.use_semantic)
    run = train(scenes, clicks, cfg.hyperparams, cfg.version, cfg=pseudo_cfg, sv=cfg.supervoxel,
                background_as_instances=p.background_as_instances, pseudo_method=p.method,
                centroid_mode=p.centroid_mode)
    save_run(run, cfg, out_path(args.out))


def cmd_infer(args) -> None:
    run, stored = load_run(args.run)
    cfg = effective_config(args, stored)
    hp = cfg.hyperparams
    scene = read_scene(_require(in_path(args.scene)))
    out = forward(run.params, scene)
    pred = infer_instances(run.params, scene, inference_config(cfg.version, hp), hp,
                           min_points=cfg.infer.min_points, output=out)
    if cfg.infer.fuse:
        semantic = fuse_semantics(run.params, scene, fusion_config(cfg.version, hp), hp.gamma, output=out)
    else:
        semantic = np.argmax(out.semantic_probs, axis=1)
    stem = out_path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    rows = [f"{i} {c} {s}" for i, (c, s) in
            enumerate(zip(pred.assignment.cluster_id.tolist(), semantic.tolist()))]
    atomic_write_text(stem.with_name(stem.name + ".points.txt"), "point cluster class\n" + "\n".join(rows) + "\n")
    rows = [f"{k} {int(c)} {repr(float(p))} {len(pred.assignment.members(k))}"
            for k, (c, p) in enumerate(zip(pred.classes, pred.confidences))]
    atomic_write_text(stem.with_name(stem.name + ".instances.txt"),
                      "cluster class confidence size\n" + "".join(r + "\n" for r in rows))
    _dump_config(cfg, stem.with_name(stem.name + ".config.json"))


def cmd_eval(args) -> None:
    run, stored = load_run(args.run)
    cfg = effective_config(args, stored)
    scenes, _ = _load_scene_set(args)
    report, _ = evaluate_run(run, scenes, cfg.hyperparams, fuse=cfg.infer.fuse, min_points=cfg.infer.min_points)
    report.meta.update({"similarity": similarity_label(cfg), "run": Path(args.run).name})
    stem = out_path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    report.write(stem)
    _dump_config(cfg, stem.with_name(stem.name + ".config.json"))


def similarity_label(cfg: RunConfig) -> str:
    """Similarity used for pseudo labels; versions without click pseudo labels group by embeddings only."""
    if cfg.version != "click":
        return "weak"
    p = cfg.pseudo
    return default_pseudo_config(cfg.hyperparams, use_spatial=p.use_spatial, use_semantic=p.use_semantic).label()


def cmd_report(args) -> None:
    reports, names = [], []
    for path in args.runs:
        p = _require(in_path(path))
        reports.append(evaluation.EvalReport.from_json(p.read_text()))
        names.append(p.name[:-5] if p.name.endswith(".json") else p.name)
    table = evaluation.ablation_table(reports, names)
    if args.out:
        out = out_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out, table)
    else:
        sys.stdout.write(table)


def emit_plot_data(runs: list[tuple[str, TrainingRun]], stem, reports=()) -> list[Path]:
    """Write ``<stem>.curve.tsv`` (pseudo-label accuracy per epoch, one column per run)
    and, with reports, ``<stem>.bars.tsv``. Returns the files written."""
    if not runs:
        raise ValueError("no training runs given")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    curves = [dict(run.pseudo_curve()) for _, run in runs]
    epochs = sorted(set().union(*curves))
    lines = ["\t".join(["epoch"] + [name for name, _ in runs])]
    for e in epochs:
        lines.append("\t".join([str(e)] + [repr(float(c[e])) if e in c else "nan" for c in curves]))
    written = [stem.with_name(stem.name + ".curve.tsv")]
    atomic_write_text(written[0], "\n".join(lines) + "\n")
    if reports:
        lines = ["name\tmap50\tmiou\tpseudo_acc"]
        for name, r in reports:
            pa = "nan" if r.pseudo_acc is None else repr(float(r.pseudo_acc))
            lines.append(f"{name}\t{repr(float(r.map50))}\t{repr(float(r.miou))}\t{pa}")
        written.append(stem.with_name(stem.name + ".bars.tsv"))
        atomic_write_text(written[1], "\n".join(lines) + "\n")
    return written


def cmd_plot_data(args) -> None:
    runs = [(Path(d).name, load_run(d)[0]) for d in args.runs]
    reports = []
    for path in args.reports or []:
        p = _require(in_path(path))
        reports.append((p.name[:-5] if p.name.endswith(".json") else p.name,
                        evaluation.EvalReport.from_json(p.read_text())))
    emit_plot_data(runs, out_path(args.out), reports)


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class UsageError(Exception):
    pass


def _scene_set_flags(p, clicks: bool):
    p.add_argument("--scenes", nargs="+", help="scene files")
    if clicks:
        p.add_argument("--clicks", nargs="+", help="click files, one per scene")
    p.add_argument("--suite", choices=sorted(SUITES), help="use a built-in suite instead of files")
    p.add_argument("--split", choices=("train", "eval"), default="train")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weakseg3d", description="Click-supervised 3D instance segmentation on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a scene (or a whole built-in suite)")
    p.add_argument("--out", required=True, help="scene file, or directory with --suite")
    p.add_argument("--suite", choices=sorted(SUITES))
    p.add_argument("--split", choices=("train", "eval"), default="train")
    add_config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("annotate", help="simulate click annotations for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", dest="ov_clicks_m", type=int, help="clicks per instance")
    add_config_flags(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("partition", help="supervoxel partition (and expanded labels with --clicks)")
    p.add_argument("--scene", required=True)
    p.add_argument("--clicks")
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="train one version on a set of annotated scenes")
    _scene_set_flags(p, clicks=True)
    p.add_argument("--out", required=True, help="run directory")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict instances and semantics for a scene")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output stem")
    add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a trained run against ground truth")
    p.add_argument("--run", required=True, help="run directory")
    _scene_set_flags(p, clicks=False)
    p.add_argument("--out", required=True, help="report stem (.txt and .json are written)")
    add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="ablation table from evaluation reports")
    p.add_argument("--runs", nargs="+", required=True, help="report .json files")
    p.add_argument("--out", help="table file (stdout when omitted)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot-data", help="columnar files for accuracy curves and ablation bars")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--reports", nargs="*", help="report .json files for the bar chart")
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=cmd_plot_data)
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(f"weakseg3d: error: usage: {_one_line(e)}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"weakseg3d: error: missing-file: {_one_line(e)}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"weakseg3d: error: config: {_one_line(e)}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError) as e:
        print(f"weakseg3d: error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
