"""Declarative experiments: flat key=value configs, the end-to-end pipeline,
deterministic report files and figure-style saliency grids."""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from . import __version__
from .causal import CausalDag, UnknownNodeError, backdoor_satisfies
from .metrics import METRICS
from .model import ArchSpec, Model, build_model, load_model, mnist_arch, pair_arch, randomize, save_model
from .report import SanityReport, sanity_check_report
from .saliency import METHODS, SaliencyMap, saliency_batch
from .tasks import (
    SHAPE_CLASSES, TINY_IMAGENET_GROUP_A, TINY_IMAGENET_GROUP_B, ImageSet, TaskDataset, concat_tasks,
    load_bundled_mnist, load_class_folders, load_dataset, load_idx, make_half_deletion_task,
    make_pair_task, make_shape_augment_task, save_dataset, split_by_class, train_test_split, upscale,
)
from .train import TrainConfig, train

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TASK_KINDS = ("half_deletion", "shape_augment", "pair")
TARGET_RULES = ("predicted", "max", "true")
REPORT_POOLS = ("all", "perturbed")
SEPARATOR = 2
SEPARATOR_VALUE = 255
REQUIRED = object()


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error


class DimensionMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def _choice(options: Sequence[str]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"{text!r} is not one of: {', '.join(options)}")
        return text
    return parse


def _boolean(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"{text!r} is not a boolean (true/false)")


def _names(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _methods(text: str) -> tuple[str, ...]:
    methods = _names(text)
    if not methods:
        raise ValueError("at least one method is required")
    for m in methods:
        _choice(METHODS)(m)
    return methods


def _arch(text: str) -> str:
    if text in ("auto", "mnist", "pair"):
        return text
    ArchSpec.from_descriptor(text)
    return text


def _int(text: str) -> int:
    return int(text, 10)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    data_seed: int
    model_seed: int
    random_seed: int
    report_seed: int
    output_dir: str
    shape_target: str = "shape"
    p_perturb: float = 0.5
    data_images: str = ""  # IDX paths; empty means the bundled MNIST sample
    data_labels: str = ""
    n_test: int = 1000
    train_draws: int = 1  # independent generator draws stacked into the training set
    pair_root: str = ""  # folder dataset with train/<class>/ and test/<class>/; empty means upscaled MNIST
    pair_classes_a: tuple[str, ...] = TINY_IMAGENET_GROUP_A
    pair_classes_b: tuple[str, ...] = TINY_IMAGENET_GROUP_B
    pair_size: int = 64
    pair_train_examples: int = 8000
    pair_test_examples: int = 1000
    arch: str = "auto"
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 10
    target_accuracy: float = 0.99
    eval_interval: int = 1
    stop_at_target: bool = False
    methods: tuple[str, ...] = METHODS
    target: str = "predicted"
    n_report_images: int = 200
    report_pool: str = "all"
    grid_rows: int = 4


_PARSERS: dict[str, Callable[[str], Any]] = {
    "task": _choice(TASK_KINDS), "data_seed": _int, "model_seed": _int, "random_seed": _int,
    "report_seed": _int, "output_dir": str, "shape_target": _choice(("shape", "digit")), "p_perturb": float,
    "data_images": str, "data_labels": str, "n_test": _int, "train_draws": _int, "pair_root": str,
    "pair_classes_a": _names, "pair_classes_b": _names, "pair_size": _int, "pair_train_examples": _int,
    "pair_test_examples": _int, "arch": _arch, "optimizer": _choice(("adam", "sgd-momentum")), "lr": float,
    "batch_size": _int, "max_epochs": _int, "target_accuracy": float, "eval_interval": _int,
    "stop_at_target": _boolean, "methods": _methods, "target": _choice(TARGET_RULES),
    "n_report_images": _int, "report_pool": _choice(REPORT_POOLS), "grid_rows": _int,
}


def _defaults() -> dict[str, Any]:
    return {f.name: REQUIRED if f.default is MISSING else f.default for f in fields(ExperimentConfig)}


def parse_config(source: Union[str, Path]) -> ExperimentConfig:
    """Parse a flat ``key = value`` config from a path or from text.

    Text is recognised by containing a newline or an ``=``; anything else is
    treated as a path.
    """
    if isinstance(source, Path) or ("\n" not in source and "=" not in source):
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc.strerror or exc}") from exc
    else:
        text = source
    seen: dict[str, int] = {}
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} on lines {seen[key]} and {lineno}")
        seen[key] = lineno
        try:
            values[key] = _PARSERS[key](value)
        except (ValueError, TypeError, IndexError, KeyError) as exc:
            if key == "task":
                raise ConfigError(f"line {lineno}: unknown task {value!r}; valid task kinds: "
                                  f"{', '.join(TASK_KINDS)}") from exc
            raise ConfigError(f"line {lineno}: malformed value for {key!r}: {exc}") from exc
    merged = _defaults()
    merged.update(values)
    missing = [k for k, v in merged.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    cfg = ExperimentConfig(**merged)
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: ExperimentConfig) -> None:
    problems = []
    if not 0 <= cfg.p_perturb <= 1:
        problems.append("p_perturb must lie in [0, 1]")
    for key in ("n_test", "train_draws", "pair_size", "pair_train_examples", "pair_test_examples",
                "batch_size", "eval_interval", "n_report_images"):
        if getattr(cfg, key) < 1:
            problems.append(f"{key} must be at least 1")
    if cfg.max_epochs < 0 or cfg.grid_rows < 0:
        problems.append("max_epochs and grid_rows must be non-negative")
    if cfg.lr < 0:
        problems.append("lr must be non-negative")
    if not 0 < cfg.target_accuracy <= 1:
        problems.append("target_accuracy must lie in (0, 1]")
    if bool(cfg.data_images) != bool(cfg.data_labels):
        problems.append("data_images and data_labels must be given together")
    if cfg.report_pool == "perturbed" and cfg.task == "pair":
        problems.append("report_pool=perturbed needs a task that perturbs images")
    if cfg.pair_root and (len(cfg.pair_classes_a) != 5 or len(cfg.pair_classes_b) != 5):
        problems.append("pair_classes_a and pair_classes_b need five class names each")
    if problems:
        raise ConfigError("; ".join(problems))


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Structured output
# --------------------------------------------------------------------------

def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value).replace("\t", " ").replace("\n", " ")


def write_table(path: Path, schema: str, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    """Tab-separated records under a one-line header naming the schema and fields."""
    lines = [f"# schema={schema}/{SCHEMA_VERSION} fields={','.join(columns)}"]
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"record has {len(row)} fields, header declares {len(columns)}")
        lines.append("\t".join(_fmt(v) for v in row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_table(path: Path) -> tuple[str, list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema="):
        raise ValueError(f"{path} has no schema header")
    schema_part, fields_part = lines[0][2:].split(" ", 1)
    columns = fields_part[len("fields="):].split(",")
    rows = [line.split("\t") for line in lines[1:]]
    return schema_part[len("schema="):], columns, rows


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def sha256_file(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config: ExperimentConfig
    tool_version: str = __version__
    artifacts: dict[str, str] = field(default_factory=dict)  # name -> path relative to the output dir
    checksums: dict[str, str] = field(default_factory=dict)  # name -> sha256 of the file bytes
    stage_checksums: dict[str, str] = field(default_factory=dict)
    summary: dict[str, str] = field(default_factory=dict)

    @property
    def root(self) -> Path:
        return Path(self.config.output_dir)

    def add(self, name: str, path: Path) -> None:
        self.artifacts[name] = Path(path).name
        self.checksums[name] = sha256_file(path)

    def path(self, name: str) -> Path:
        return self.root / self.artifacts[name]

    def verify(self) -> list[str]:
        """Names of artifacts that are missing or whose bytes changed."""
        bad = []
        for name, rel in self.artifacts.items():
            p = self.root / rel
            if not p.is_file() or sha256_file(p) != self.checksums[name]:
                bad.append(name)
        return bad

    def write(self, path: Optional[Path] = None) -> Path:
        path = Path(path or self.root / "manifest.tsv")
        rows = [("tool", "version", self.tool_version, "")]
        rows += [("config", *line.split(" = ", 1), "") for line in serialize_config(self.config).splitlines()]
        rows += [("stage", k, v, "") for k, v in self.stage_checksums.items()]
        rows += [("summary", k, v, "") for k, v in self.summary.items()]
        rows += [("artifact", k, self.artifacts[k], self.checksums[k]) for k in self.artifacts]
        write_table(path, "manifest", ("section", "key", "value", "sha256"), rows)
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        schema, _, rows = read_table(Path(path))
        if schema != f"manifest/{SCHEMA_VERSION}":
            raise ValueError(f"{path} is not a version-{SCHEMA_VERSION} manifest (schema {schema})")
        config_lines = [f"{k} = {v}" for section, k, v, _ in rows if section == "config"]
        m = cls(parse_config("\n".join(config_lines) + "\n"))
        for section, key, value, digest in rows:
            if section == "tool":
                m.tool_version = value
            elif section == "stage":
                m.stage_checksums[key] = value
            elif section == "summary":
                m.summary[key] = value
            elif section == "artifact":
                m.artifacts[key], m.checksums[key] = value, digest
        return m


AGGREGATE_FIELDS = ("method", "quantity", "mean", "std")
RECORD_FIELDS = ("image", "method", "quantity", "value")
REPORT_QUANTITIES = (*METRICS, "localization_trained", "localization_random")


def emit_report(manifest: RunManifest, report: SanityReport) -> list[Path]:
    """Write the aggregate table and per-image records and register them in the manifest."""
    agg = manifest.root / "report_aggregate.tsv"
    rows = [(method, q, mean, std) for (method, q), (mean, std) in report.aggregates.items()]
    write_table(agg, "aggregate", AGGREGATE_FIELDS, rows)
    rec = manifest.root / "report_records.tsv"
    rows = [(r["image"], r["method"], q, r[q]) for r in report.records for q in REPORT_QUANTITIES]
    write_table(rec, "records", RECORD_FIELDS, rows)
    manifest.add("report_aggregate", agg)
    manifest.add("report_records", rec)
    return [agg, rec]


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

def _to_gray_cell(source: np.ndarray) -> np.ndarray:
    img = np.asarray(source, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    return np.clip(img, 0.0, 1.0)


def _map_cell(smap: Union[SaliencyMap, np.ndarray], signed: bool) -> np.ndarray:
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    values = values.reshape((-1,) + values.shape[-2:])
    if signed:
        v = values.sum(axis=0)
        peak = np.abs(v).max()
        return 0.5 * (1 + v / peak) if peak > 0 else np.full(v.shape, 0.5)
    v = np.abs(values).max(axis=0)
    peak = v.max()
    return v / peak if peak > 0 else np.zeros_like(v)


def render_grid(rows: Sequence[tuple[np.ndarray, Sequence[tuple[Union[SaliencyMap, np.ndarray], str]]]],
                path: Union[str, Path], signed: bool = False) -> Path:
    """Binary PGM: source image on the left, then one abs-maxnorm map per column.

    Cells are separated by 2-pixel white bars. Captions go into header comments,
    so the file bytes depend only on the inputs.
    """
    if not rows:
        raise DimensionMismatch("nothing to render")
    cells, captions = [], []
    for r, (source, maps) in enumerate(rows):
        row = [_to_gray_cell(source)] + [_map_cell(m, signed) for m, _ in maps]
        shape = row[0].shape
        for c, cell in enumerate(row):
            if cell.shape != shape:
                raise DimensionMismatch(f"row {r} column {c} is {cell.shape}, source is {shape}")
        cells.append(row)
        captions.append(" | ".join(["source", *(caption for _, caption in maps)]))
    ncols = len(cells[0])
    h, w = cells[0][0].shape
    if any(len(row) != ncols or row[0].shape != (h, w) for row in cells):
        raise DimensionMismatch("every row needs the same cell size and column count")
    width = ncols * w + (ncols - 1) * SEPARATOR
    height = len(cells) * h + (len(cells) - 1) * SEPARATOR
    canvas = np.full((height, width), SEPARATOR_VALUE, dtype=np.uint8)
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            y, x = r * (h + SEPARATOR), c * (w + SEPARATOR)
            canvas[y:y + h, x:x + w] = np.rint(cell * 255).astype(np.uint8)
    header = "P5\n" + "".join(f"# row {i}: {cap}\n" for i, cap in enumerate(captions))
    header += f"{width} {height}\n255\n"
    path = Path(path)
    try:
        _atomic_write(path, header.encode() + canvas.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write grid to {path}: {exc.strerror or exc}") from exc
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5\n"):
        raise ValueError(f"{path} is not a binary PGM")
    lines, pos = [], 3
    while len(lines) < 2:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode()
        pos = end + 1
        if not line.startswith("#"):
            lines.append(line)
    w, h = map(int, lines[0].split())
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------

def derived_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def _base_images(cfg: ExperimentConfig) -> ImageSet:
    if cfg.data_images:
        return load_idx(cfg.data_images, cfg.data_labels)
    return load_bundled_mnist()


def build_datasets(cfg: ExperimentConfig) -> tuple[TaskDataset, TaskDataset]:
    """Training and test task sets. The test set is one generator draw over
    held-out base images; the training set stacks ``train_draws`` draws."""
    test_seed = derived_seed(cfg.data_seed, 0)
    train_seeds = [derived_seed(cfg.data_seed, k) for k in range(1, cfg.train_draws + 1)]
    if cfg.task == "pair":
        if cfg.pair_root:
            root = Path(cfg.pair_root)
            parts = [[load_class_folders(root / split, names, cfg.pair_size)
                      for names in (cfg.pair_classes_a, cfg.pair_classes_b)] for split in ("train", "test")]
            names = cfg.pair_classes_a
        else:
            base_train, base_test = train_test_split(_base_images(cfg), cfg.n_test, cfg.data_seed)
            parts = [split_by_class(upscale(b, cfg.pair_size), range(5), range(5, 10))
                     for b in (base_train, base_test)]
            names = tuple(str(d) for d in range(5))
        (a_tr, b_tr), (a_te, b_te) = parts
        train_set = concat_tasks([make_pair_task(a_tr, b_tr, cfg.pair_train_examples, s, names)
                                  for s in train_seeds])
        test_set = make_pair_task(a_te, b_te, cfg.pair_test_examples, test_seed, names)
        return train_set, test_set
    base_train, base_test = train_test_split(_base_images(cfg), cfg.n_test, cfg.data_seed)
    if cfg.task == "half_deletion":
        def make(base, seed):
            return make_half_deletion_task(base, cfg.p_perturb, seed)
    else:
        def make(base, seed):
            return make_shape_augment_task(base, cfg.shape_target, seed)
    return concat_tasks([make(base_train, s) for s in train_seeds]), make(base_test, test_seed)


def resolve_arch(cfg: ExperimentConfig, dataset: TaskDataset) -> ArchSpec:
    k = dataset.examples.num_classes
    shape = dataset.images.shape[1:]
    if cfg.arch == "auto":
        return pair_arch(k, shape) if cfg.task == "pair" else mnist_arch(k, shape)
    if cfg.arch == "mnist":
        return mnist_arch(k, shape)
    if cfg.arch == "pair":
        return pair_arch(k, shape)
    arch = ArchSpec.from_descriptor(cfg.arch)
    if arch.input_shape != shape or arch.num_classes != k:
        raise ValueError(f"arch expects {arch.input_shape} with {arch.num_classes} classes, "
                         f"task provides {shape} with {k}")
    return arch


def perturbed_indices(dataset: TaskDataset) -> list[int]:
    """Examples the generator actually modified (deleted half or added shape)."""
    out = []
    for i, meta in enumerate(dataset.gen_meta):
        if meta.get("perturbed") or meta.get("kind") in SHAPE_CLASSES[1:]:
            out.append(i)
    return out


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(optimizer=cfg.optimizer, lr=cfg.lr, batch_size=cfg.batch_size,
                       max_epochs=cfg.max_epochs, target_accuracy=cfg.target_accuracy,
                       eval_interval=cfg.eval_interval, seed=cfg.model_seed,
                       stop_at_target=cfg.stop_at_target)


def grid_rows_for(report: SanityReport, dataset: TaskDataset, trained: Model, random: Model,
                  cfg: ExperimentConfig) -> list:
    picks = report.indices[:cfg.grid_rows]
    if not picks:
        return []
    images = dataset.images[picks]
    labels = dataset.labels[picks] if cfg.target == "true" else None
    columns = []
    for method in cfg.methods:
        for name, model in (("trained", trained), ("random", random)):
            columns.append((f"{method} {name}", saliency_batch(model, images, method, cfg.target, labels)))
    return [(images[r], [(maps[r], caption) for caption, maps in columns]) for r in range(len(picks))]


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """generate, train, randomize, report, render; the manifest is written last.

    A failed stage leaves ``failure.tsv`` naming the stage, the error and the
    files written so far, and raises :class:`StageError`.
    """
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    for stale in ("manifest.tsv", "failure.tsv"):
        (root / stale).unlink(missing_ok=True)
    manifest = RunManifest(cfg)
    stage = "generate"
    try:
        train_set, test_set = build_datasets(cfg)
        for name, ds in (("dataset_train", train_set), ("dataset_test", test_set)):
            save_dataset(ds, root / f"{name}.ssmd")
            manifest.add(name, root / f"{name}.ssmd")

        stage = "train"
        model = build_model(resolve_arch(cfg, train_set), cfg.model_seed)
        trained, train_report = train(model, train_set, test_set, train_config(cfg))
        save_model(trained, root / "model_trained.ssmd")
        manifest.add("model_trained", root / "model_trained.ssmd")
        write_table(root / "train_log.tsv", "train_log", ("kind", "epoch", "value"),
                    [(r["kind"], r["epoch"], r["value"]) for r in train_report.records()])
        manifest.add("train_log", root / "train_log.tsv")
        manifest.stage_checksums["train"] = train_report.checksum
        manifest.summary.update(best_accuracy=_fmt(train_report.best_accuracy),
                                best_epoch=str(train_report.best_epoch),
                                reached_target=_fmt(train_report.reached_target))

        stage = "randomize"
        random = randomize(trained, cfg.random_seed)
        save_model(random, root / "model_random.ssmd")
        manifest.add("model_random", root / "model_random.ssmd")
        manifest.stage_checksums["randomize"] = random.checksum()

        stage = "report"
        pool = perturbed_indices(test_set) if cfg.report_pool == "perturbed" else None
        report = sanity_check_report(test_set, trained, random, cfg.methods, cfg.n_report_images,
                                     cfg.report_seed, cfg.target, pool)
        emit_report(manifest, report)
        manifest.summary["report_images"] = ",".join(str(i) for i in report.indices)

        stage = "render"
        if cfg.grid_rows:
            for name, path in render_grids(grid_rows_for(report, test_set, trained, random, cfg), root).items():
                manifest.add(name, path)

        stage = "manifest"
        manifest.write()
    except Exception as exc:
        written = [manifest.artifacts[k] for k in manifest.artifacts]
        write_table(root / "failure.tsv", "failure", ("stage", "error", "partial_outputs"),
                    [(stage, f"{type(exc).__name__}: {exc}", ",".join(written))])
        raise StageError(stage, exc) from exc
    return manifest


GRIDS = {"grid": ("grid.pgm", False), "grid_signed": ("grid_signed.pgm", True)}


def render_grids(rows, directory: Path) -> dict[str, Path]:
    """Both renderings of the same rows: absolute maps and signed maps (mid-gray = 0)."""
    return {name: render_grid(rows, Path(directory) / fname, signed) for name, (fname, signed) in GRIDS.items()}


def rerender(manifest_path: Union[str, Path], out: Optional[Union[str, Path]] = None) -> dict[str, Path]:
    """Rebuild the grids of a finished run from its stored dataset and models."""
    manifest = RunManifest.read(manifest_path)
    bad = manifest.verify()
    if bad:
        raise ValueError(f"artifacts missing or modified since the run: {', '.join(bad)}")
    cfg = manifest.config
    test_set = load_dataset(manifest.path("dataset_test"))
    trained = load_model(manifest.path("model_trained"))
    random = load_model(manifest.path("model_random"))
    indices = [int(i) for i in manifest.summary["report_images"].split(",") if i]
    stub = SanityReport(test_set.task_id, indices, cfg.methods)
    rows = grid_rows_for(stub, test_set, trained, random, cfg)
    target = Path(out) if out else manifest.root
    target.mkdir(parents=True, exist_ok=True)
    return render_grids(rows, target)


# --------------------------------------------------------------------------
# Command line
# --------------------------------------------------------------------------

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _cmd_validate(args) -> int:
    cfg = parse_config(Path(args.config))
    print(serialize_config(cfg), end="")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = parse_config(Path(args.config))
    manifest = run_experiment(cfg)
    print(f"manifest: {manifest.root / 'manifest.tsv'}")
    for k, v in manifest.summary.items():
        if k != "report_images":
            print(f"{k}: {v}")
    return EXIT_OK


def _cmd_render(args) -> int:
    for path in rerender(args.manifest, args.out).values():
        print(f"grid: {path}")
    return EXIT_OK


def _cmd_check_backdoor(args) -> int:
    z = [n.strip() for n in args.z.split(",") if n.strip()]
    try:
        dag = CausalDag.parse(Path(args.dag_file).read_text())
        result = backdoor_satisfies(dag, args.x, args.y, z)
    except OSError as exc:
        raise ConfigError(f"cannot read DAG file {args.dag_file}: {exc.strerror or exc}") from exc
    except (UnknownNodeError, ValueError) as exc:  # cycles, bad lines, unknown nodes, x or y inside z
        raise ConfigError(str(exc).strip("'\"")) from exc
    zs = "{" + ", ".join(z) + "}"
    if result:
        print(f"satisfied: {zs} satisfies the back-door criterion for ({args.x}, {args.y})")
    else:
        print(f"not satisfied: {result.certificate}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causal-saliency", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config end to end")
    p.add_argument("config")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("render", help="re-render the saliency grids of a finished run")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="directory for the grids (default: next to the manifest)")
    p.set_defaults(func=_cmd_render)
    p = sub.add_parser("check-backdoor", help="test the back-door criterion on a DAG file")
    p.add_argument("dag_file")
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("z", nargs="?", default="", help="comma-separated adjustment set (may be empty)")
    p.set_defaults(func=_cmd_check_backdoor)
    p = sub.add_parser("validate", help="parse a config and print it with defaults filled in")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as an exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
