"""Config-driven runs over a content-addressed workspace.

A run config lists stages in order. Each stage has a ``type`` (one of
:data:`STAGE_TYPES`), named ``inputs`` and ``params``. An input is either a
reference to an earlier stage's output (``"corpus"`` or ``"corpus/train.tsv"``)
or a path outside the workspace, resolved relative to the config file.

A stage's cache key hashes its type, params, derived seed, the content of
its inputs and the tool version. Outputs live in ``objects/<key>/`` and a
readable alias ``named/<stage>`` points at them, so an unchanged stage is
never recomputed. A stage reruns when the bytes of any of its inputs change,
so a change propagates downstream for as long as it alters what a stage writes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from . import stages as st
from ._version import __version__
from .core import MmfndError, derive_seed
from .evaluation import GRID_SETS

log = logging.getLogger(__name__)

# files that legitimately differ between identical runs (wall-clock timings);
# they are kept in the workspace but excluded from every hash
VOLATILE_FILES = frozenset({"train_log.jsonl"})
WORKSPACE_ENV = "MMFND_WORKSPACE"


class ConfigInvalid(MmfndError):
    pass


class StageFailed(MmfndError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# hashing


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def file_hashes(path: Path) -> dict[str, str]:
    """Relative path -> sha256 for every non-volatile file under ``path``."""
    path = Path(path)
    if path.is_file():
        return {path.name: _sha256_file(path)}
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name not in VOLATILE_FILES:
            out[p.relative_to(path).as_posix()] = _sha256_file(p)
    return out


def hash_path(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return _sha256_file(path)
    blob = json.dumps(file_hashes(path), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _hash_ref(path: Path) -> str:
    if path.exists():
        return hash_path(path)
    # a data base name such as ``encode/train`` stands for train.tsv + train.emb
    siblings = sorted(path.parent.glob(path.name + ".*")) if path.parent.is_dir() else []
    if not siblings:
        raise FileNotFoundError(f"input {path} does not exist")
    blob = json.dumps({p.name: hash_path(p) for p in siblings}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


# ---------------------------------------------------------------------------
# config

InputValue = Union[str, list, dict]


@dataclass(frozen=True)
class StageRef:
    stage: str
    subpath: str = ""


@dataclass(frozen=True)
class StageSpec:
    name: str
    type: str
    inputs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    stages: tuple[StageSpec, ...]
    seed: int = 0
    workspace: Path = Path("workspace")
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigInvalid(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    @classmethod
    def from_dict(cls, doc: Any, base_dir: str | os.PathLike = ".") -> "RunConfig":
        base_dir = Path(base_dir)
        if not isinstance(doc, Mapping):
            raise ConfigInvalid("config must be a mapping")
        if "stages" not in doc or not isinstance(doc["stages"], list) or not doc["stages"]:
            raise ConfigInvalid("stages: missing or empty")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigInvalid(f"seed: expected an integer, got {seed!r}")
        workspace = Path(doc.get("workspace", "workspace"))
        stages = []
        for i, raw in enumerate(doc["stages"]):
            where = f"stages[{i}]"
            if not isinstance(raw, Mapping):
                raise ConfigInvalid(f"{where}: expected a mapping")
            for key in ("name", "type"):
                if key not in raw:
                    raise ConfigInvalid(f"{where}.{key}: missing")
            if raw["type"] not in STAGE_TYPES:
                raise ConfigInvalid(f"{where}.type: unknown stage type {raw['type']!r}; one of {sorted(STAGE_TYPES)}")
            stages.append(StageSpec(str(raw["name"]), raw["type"], dict(raw.get("inputs") or {}), dict(raw.get("params") or {})))
        config = cls(tuple(stages), seed, workspace if workspace.is_absolute() else base_dir / workspace, base_dir)
        config.validate()
        return config

    def to_dict(self) -> dict:
        """Run-defining content: excludes the workspace location."""
        return {
            "seed": self.seed,
            "stages": [{"name": s.name, "type": s.type, "inputs": s.inputs, "params": s.params} for s in self.stages],
        }

    def resolve_workspace(self) -> Path:
        env = os.environ.get(WORKSPACE_ENV)
        return Path(env) if env else self.workspace

    def parse_ref(self, value: str, earlier: Mapping[str, int], where: str, all_names: set[str]):
        head, _, rest = str(value).partition("/")
        if head in earlier:
            return StageRef(head, rest)
        if head in all_names:
            raise ConfigInvalid(f"{where}: {value!r} refers to stage {head!r} which does not run earlier (cycle or forward reference)")
        path = Path(value)
        path = path if path.is_absolute() else self.base_dir / path
        if not path.exists() and not any(path.parent.glob(path.name + ".*")):
            raise ConfigInvalid(f"{where}: input path {path} does not exist")
        return path

    def resolved_inputs(self, spec: StageSpec, earlier: Mapping[str, int], where: str, names: set[str]) -> dict:
        def walk(value, w):
            if isinstance(value, list):
                return [walk(v, f"{w}[{k}]") for k, v in enumerate(value)]
            if isinstance(value, Mapping):
                return {k: walk(v, f"{w}.{k}") for k, v in value.items()}
            return self.parse_ref(value, earlier, w, names)

        return {k: walk(v, f"{where}.inputs.{k}") for k, v in spec.inputs.items()}

    def validate(self) -> None:
        names = [s.name for s in self.stages]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigInvalid(f"stages: duplicate stage names {sorted(dupes)}")
        earlier: dict[str, int] = {}
        for i, spec in enumerate(self.stages):
            where = f"stages[{i}]"
            stype = STAGE_TYPES[spec.type]
            for req in stype.required:
                if req not in spec.inputs:
                    raise ConfigInvalid(f"{where}.inputs.{req}: missing (required by {spec.type})")
            unknown = set(spec.inputs) - set(stype.required) - set(stype.optional)
            if unknown:
                raise ConfigInvalid(f"{where}.inputs: unknown inputs {sorted(unknown)} for {spec.type}")
            self.resolved_inputs(spec, earlier, where, set(names))
            earlier[spec.name] = i


# ---------------------------------------------------------------------------
# stage types


@dataclass(frozen=True)
class StageType:
    execute: Callable[[dict, dict, int, Path], None]
    required: tuple[str, ...] = ()
    optional: tuple[str, ...] = ()


def _model_path(p: Path) -> Path:
    return p / "model.ckpt" if p.is_dir() else p


def _exec_fixtures(inputs, params, seed, out):
    params = dict(params)
    params.setdefault("seed", seed)
    st.run_fixtures(out, **params)


def _exec_ingest(inputs, params, seed, out):
    st.run_ingest(inputs["source"], out, **params)


def _exec_manipulate(inputs, params, seed, out):
    params = dict(params)
    technique = params.pop("technique")
    st.run_manipulate(
        inputs["manifest"], out / "manifest.tsv", technique, seed,
        alias_table=inputs.get("alias_table"), curated_map=inputs.get("curated_map"),
        annotations=inputs.get("annotations"), entities=inputs.get("entities"),
        pool_manifest=inputs.get("pool"), **params,
    )


def _exec_vnme(inputs, params, seed, out):
    as_list = lambda v: v if isinstance(v, list) else [v]  # noqa: E731
    st.run_make_vnme(as_list(inputs["originals"]), as_list(inputs["evtrep"]), as_list(inputs["fakeim"]), out,
                     prefix=params.get("prefix", ""))


def _exec_testgrid(inputs, params, seed, out):
    st.run_testgrid(inputs["manifest"], out, inputs["alias_table"], inputs["curated_map"], inputs["annotations"],
                    seed=seed, n=params.get("n", 100))


def _named(value) -> dict[str, Path]:
    if isinstance(value, Mapping):
        return dict(value)
    items = value if isinstance(value, list) else [value]
    return {Path(p).stem: p for p in items}


def _exec_encode(inputs, params, seed, out):
    # the encoder seed is a plain parameter (default 0), not the stage seed:
    # two encode stages must map equal content to equal vectors
    for name, manifest in _named(inputs["manifests"]).items():
        manifest = st.data_paths(manifest)[0]
        shutil.copyfile(manifest, out / f"{name}.tsv")
        st.run_encode(out / f"{name}.tsv", inputs["images"], out / f"{name}.emb",
                      planted_aliases=inputs.get("planted_aliases"), **params)


def _exec_train(inputs, params, seed, out):
    params = dict(params)
    arch = params.pop("arch")
    params.setdefault("seed", seed)
    st.run_train(arch, inputs["train"], inputs["validation"], out / "model.ckpt", out / "train_log.jsonl", **params)


def _exec_predict(inputs, params, seed, out):
    st.run_predict(_model_path(inputs["model"]), inputs["data"], out / "predictions.tsv")


def _exec_ensemble(inputs, params, seed, out):
    st.run_ensemble([_model_path(m) for m in inputs["members"]], inputs["data"], out / "predictions.tsv")


def _exec_evaluate(inputs, params, seed, out):
    manifest = st.data_paths(inputs["data"])[0]
    pred = inputs["predictions"]
    pred = pred / "predictions.tsv" if pred.is_dir() else pred
    st.run_evaluate(pred, manifest, out / "report", averaging=params.get("averaging", "macro"))


def _exec_grid(inputs, params, seed, out):
    sets = inputs["sets"]
    if isinstance(sets, Path):
        sets = {name: sets / name for name in params.get("set_names", GRID_SETS)}
    models = {
        name: [_model_path(m) for m in ref] if isinstance(ref, list) else _model_path(ref)
        for name, ref in inputs["models"].items()
    }
    st.run_grid(models, sets, out, averaging=params.get("averaging", "macro"))


STAGE_TYPES: dict[str, StageType] = {
    "fixtures": StageType(_exec_fixtures),
    "ingest": StageType(_exec_ingest, ("source",)),
    "manipulate": StageType(_exec_manipulate, ("manifest",), ("alias_table", "curated_map", "annotations", "entities", "pool")),
    "vnme": StageType(_exec_vnme, ("originals", "evtrep", "fakeim")),
    "testgrid": StageType(_exec_testgrid, ("manifest", "alias_table", "curated_map", "annotations")),
    "encode": StageType(_exec_encode, ("manifests", "images"), ("planted_aliases",)),
    "train": StageType(_exec_train, ("train", "validation")),
    "predict": StageType(_exec_predict, ("model", "data")),
    "ensemble": StageType(_exec_ensemble, ("members", "data")),
    "evaluate": StageType(_exec_evaluate, ("predictions", "data")),
    "grid": StageType(_exec_grid, ("models", "sets")),
}


# ---------------------------------------------------------------------------
# running


@dataclass
class StageOutcome:
    name: str
    type: str
    key: str
    seed: int
    status: str  # "ran", "cached" or (dry run) "would-run" / "cached"
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class RunResult:
    workspace: Path
    outcomes: list[StageOutcome]
    manifest: dict

    @property
    def statuses(self) -> dict[str, str]:
        return {o.name: o.status for o in self.outcomes}

    def output(self, stage: str) -> Path:
        return self.workspace / "named" / stage


def _stage_key(spec: StageSpec, seed: int, input_hashes: dict) -> str:
    blob = canonical_json(
        {"type": spec.type, "params": spec.params, "seed": seed, "inputs": input_hashes, "version": __version__}
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _materialize(value, paths: Mapping[str, Path]):
    if isinstance(value, list):
        return [_materialize(v, paths) for v in value]
    if isinstance(value, dict):
        return {k: _materialize(v, paths) for k, v in value.items()}
    if isinstance(value, StageRef):
        base = paths[value.stage]
        return base / value.subpath if value.subpath else base
    return value


def _hash_inputs(value, hashes_of: Callable[[Path], str]):
    if isinstance(value, list):
        return [_hash_inputs(v, hashes_of) for v in value]
    if isinstance(value, dict):
        return {k: _hash_inputs(v, hashes_of) for k, v in value.items()}
    return hashes_of(value)


def _link(alias: Path, target: Path) -> None:
    alias.parent.mkdir(parents=True, exist_ok=True)
    if alias.is_symlink() or alias.exists():
        if alias.is_dir() and not alias.is_symlink():
            shutil.rmtree(alias)
        else:
            alias.unlink()
    try:
        alias.symlink_to(os.path.relpath(target, alias.parent), target_is_directory=True)
    except OSError:
        shutil.copytree(target, alias)


def run(
    config: RunConfig, dry_run: bool = False, force: bool = False, workspace: Optional[str | os.PathLike] = None
) -> RunResult:
    """Execute (or with ``dry_run`` only plan) every stage in order.

    Stages whose key already has a complete, unmodified output in the
    workspace are reported as ``cached`` and not executed.
    """
    config.validate()
    ws = Path(workspace) if workspace else config.resolve_workspace()
    objects, records = ws / "objects", ws / "stages"
    names = {s.name for s in config.stages}
    paths: dict[str, Path] = {}
    unknown: set[str] = set()  # dry run: stages whose outputs are not yet known
    outcomes: list[StageOutcome] = []
    earlier: dict[str, int] = {}

    for i, spec in enumerate(config.stages):
        refs = config.resolved_inputs(spec, earlier, f"stages[{i}]", names)
        earlier[spec.name] = i
        seed = derive_seed(config.seed, spec.name)
        upstream = _stage_refs(refs)
        if dry_run and upstream & unknown:
            outcomes.append(StageOutcome(spec.name, spec.type, "", seed, "would-run"))
            unknown.add(spec.name)
            continue
        materialized = _materialize(refs, paths)
        try:
            input_hashes = _hash_inputs(materialized, _hash_ref)
        except FileNotFoundError as exc:
            raise StageFailed(spec.name, exc) from exc
        key = _stage_key(spec, seed, input_hashes)
        out_dir = objects / key
        record_path = records / f"{key}.json"
        cached = not force and _intact(out_dir, record_path)
        outcome = StageOutcome(spec.name, spec.type, key, seed, "cached" if cached else ("would-run" if dry_run else "ran"),
                               input_hashes)
        if dry_run:
            if cached:
                paths[spec.name] = out_dir
                outcome.outputs = json.loads(record_path.read_text())["outputs"]
            else:
                unknown.add(spec.name)
            outcomes.append(outcome)
            continue
        if not cached:
            outcome.seconds = _execute(spec, materialized, seed, out_dir, record_path)
        outcome.outputs = json.loads(record_path.read_text())["outputs"]
        paths[spec.name] = out_dir
        _link(ws / "named" / spec.name, out_dir)
        log.info("%-16s %-8s %s", spec.name, outcome.status, key[:12])
        outcomes.append(outcome)

    manifest = run_manifest(config, outcomes)
    if not dry_run:
        ws.mkdir(parents=True, exist_ok=True)
        (ws / "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return RunResult(ws, outcomes, manifest)


def _stage_refs(value) -> set[str]:
    if isinstance(value, list):
        return set().union(*(_stage_refs(v) for v in value)) if value else set()
    if isinstance(value, dict):
        return set().union(*(_stage_refs(v) for v in value.values())) if value else set()
    return {value.stage} if isinstance(value, StageRef) else set()


def _intact(out_dir: Path, record_path: Path) -> bool:
    if not (out_dir.is_dir() and record_path.exists()):
        return False
    try:
        recorded = json.loads(record_path.read_text())["outputs"]
    except (ValueError, KeyError):
        return False
    return recorded == file_hashes(out_dir)


def _execute(spec: StageSpec, inputs: dict, seed: int, out_dir: Path, record_path: Path) -> float:
    tmp = out_dir.with_name(out_dir.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    start = time.perf_counter()
    try:
        STAGE_TYPES[spec.type].execute(inputs, spec.params, seed, tmp)
    except Exception as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise StageFailed(spec.name, exc) from exc
    elapsed = time.perf_counter() - start
    if out_dir.exists():
        shutil.rmtree(out_dir)
    tmp.rename(out_dir)
    record_path.parent.mkdir(parents=True, exist_ok=True)
    record = {"name": spec.name, "type": spec.type, "outputs": file_hashes(out_dir)}
    record_path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return elapsed


def run_manifest(config: RunConfig, outcomes: list[StageOutcome]) -> dict:
    """Deterministic description of a run: identical configs and inputs give
    identical bytes, whatever the workspace location or cache state."""
    return {
        "tool_version": __version__,
        "config_sha256": hashlib.sha256(canonical_json(config.to_dict()).encode()).hexdigest(),
        "seed": config.seed,
        "stages": [
            {
                "name": o.name,
                "type": o.type,
                "key": o.key,
                "seed": o.seed,
                "inputs": o.inputs,
                "outputs": o.outputs,
            }
            for o in outcomes
        ],
    }


def describe_plan(result: RunResult) -> str:
    lines = []
    for o in result.outcomes:
        lines.append(f"{o.name:<20} {o.type:<10} {o.status:<9} {o.key[:12] or '-'}")
    return "\n".join(lines) + "\n"


def load_and_run(path: str | os.PathLike, dry_run: bool = False, workspace: Optional[str] = None) -> RunResult:
    return run(RunConfig.load(path), dry_run=dry_run, workspace=workspace)
