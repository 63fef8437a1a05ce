"""Experiment orchestration: data, base pretraining, adapter stages, timed
evaluation, ablations and report emission.

Every stage reads and writes artifacts under one output directory, so the
CLI can run stages one at a time or ``run_experiment`` can chain them::

    <out>/seed<s>/data/{train,eval}.jsonl
    <out>/seed<s>/base.{json,bin}
    <out>/seed<s>/baseline-{r0,r1,pause}.{json,bin}
    <out>/seed<s>/ccot-r<r>-l<l>-{phi,psi,end}.{json,bin}
    <out>/report.{csv,json}, reference.json, manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import torch

from . import expressivity
from .adapters import LoraAdapter, load_adapters, save_adapters
from .compression import CompressionSpec, build_gold, drop_overlong, target_length
from .data import Tokenizer, gen_corpus, load_gsm_jsonl, normalize_answer, read_jsonl, write_jsonl
from .inference import GenerationResult, ccot_generate, cot_generate, direct_generate, pause_generate, timed
from .model import ModelConfig, TinyLM, load_model, load_tensors, save_model, save_tensors, with_ext
from .training import (
    EndClassifier,
    TrainConfig,
    end_training_data,
    pretrain,
    train_baseline,
    train_end,
    train_phi,
    train_psi,
    write_curve,
)

log = logging.getLogger(__name__)

METHODS = ("ccot", "cot_r1", "none_r0", "pause")
COLUMNS = ("method", "r", "l", "em", "decode_s", "cont_tokens", "n", "seed")
TIMING_COLUMNS = ("decode_s",)

REFERENCE_LABEL = "paper, 7B — not desk-reproducible"
# (method, r, l) -> (EM, decode seconds) on GSM8K with a 7B model
REFERENCE_ROWS = {
    ("none_r0", 0.0, None): (0.089, 0.33),
    ("ccot", 0.05, 16): (0.151, 0.49),
    ("ccot", 0.1, 16): (0.179, 0.78),
    ("cot_r1", 1.0, None): (0.315, 8.10),
    ("pause", 0.05, None): (0.092, 0.35),
    ("pause", 0.1, None): (0.099, 0.37),
}
REFERENCE_LAYER_ROWS = {3: 0.087, 15: 0.151, 31: 0.092, None: 0.089}


@dataclass
class DatasetSpec:
    seed: int = 1
    train_size: int = 5000
    eval_size: int = 500
    steps: tuple[int, ...] = (2, 3, 4)
    value_range: tuple[int, int] = (1, 9)
    max_value: int = 99
    gsm_train: str | None = None  # optional GSM8K-format jsonl files
    gsm_eval: str | None = None


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=1500))
    phi: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, steps=300))
    psi: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=600))
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, steps=600))
    methods: tuple[str, ...] = METHODS
    ratios: tuple[float, ...] = (0.05, 0.1)
    layer: int = 4
    ablate_layers: tuple[int, ...] = (1, 4, 7)
    ablate_r: float = 0.1
    pause_r: float = 0.1
    phi_rank: int = 16
    psi_rank: int = 8
    baseline_rank: int = 8
    direct_fraction: float = 0.3
    end_threshold: float = 0.5
    timing_instances: int = 50
    timing_repetitions: int = 3
    timing_warmup: int = 1
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/desk"

    def validate(self) -> None:
        if not self.methods:
            raise ValueError("config lists no methods")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if not self.seeds:
            raise ValueError("config lists no seeds")
        if self.model.vocab_size < len(Tokenizer.synthetic()):
            raise ValueError("vocabulary smaller than the tokenizer")
        for r in self.ratios:
            CompressionSpec(r=r, layer=self.layer).check(self.model.num_layers)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        nested = {"model": ModelConfig, "data": DatasetSpec, "pretrain": TrainConfig, "phi": TrainConfig,
                  "psi": TrainConfig, "baseline": TrainConfig}
        for key, typ in nested.items():
            if key in obj:
                sub = dict(obj[key])
                for f in fields(typ):
                    if isinstance(sub.get(f.name), list):
                        sub[f.name] = tuple(sub[f.name])
                obj[key] = typ(**sub)
        for key in ("methods", "ratios", "ablate_layers", "seeds"):
            if key in obj:
                obj[key] = tuple(obj[key])
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class ReportRow:
    method: str
    r: float
    l: int | None
    em: float | None  # None marks a failed stage
    decode_s: float | None
    cont_tokens: float | None
    n: int
    seed: int

    def cells(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in COLUMNS]


@dataclass
class RunReport:
    rows: list[ReportRow] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    artifacts: dict[str, list[str]] = field(default_factory=dict)  # row key -> checkpoint files

    @property
    def ok(self) -> bool:
        return not self.failures

    def extend(self, other: "RunReport") -> None:
        self.rows += other.rows
        self.failures += other.failures
        self.artifacts.update(other.artifacts)

    def find(self, method: str, r: float | None = None, l: int | None = None, seed: int | None = None) -> ReportRow:
        for row in self.rows:
            if row.method == method and (r is None or row.r == r) and (l is None or row.l == l) \
                    and (seed is None or row.seed == seed):
                return row
        raise KeyError((method, r, l, seed))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def row_key(row: ReportRow) -> str:
    return f"{row.method}|r={_fmt(row.r)}|l={_fmt(row.l)}|seed={row.seed}"


# -- stages -------------------------------------------------------------------

def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"seed{seed}"


def _r_tag(r: float) -> str:
    return f"{r:g}"


def stage_data(cfg: ExperimentConfig, seed: int) -> tuple[Path, Path]:
    """Write train/eval jsonl; eval questions never occur in train."""
    d = seed_dir(cfg, seed) / "data"
    d.mkdir(parents=True, exist_ok=True)
    ds = cfg.data
    tok = Tokenizer.synthetic()
    if ds.gsm_train:
        train = load_gsm_jsonl(ds.gsm_train)
        evalset = load_gsm_jsonl(ds.gsm_eval) if ds.gsm_eval else []
    else:
        pool = gen_corpus(ds.seed + 1000 * seed, ds.train_size + ds.eval_size, ds.steps, ds.value_range,
                          ds.max_value, tok)
        train, evalset = pool[: ds.train_size], pool[ds.train_size:]
    write_jsonl(d / "train.jsonl", train)
    write_jsonl(d / "eval.jsonl", evalset)
    log.info("data: %d train, %d eval instances", len(train), len(evalset))
    return d / "train.jsonl", d / "eval.jsonl"


def _tokenizer(cfg: ExperimentConfig) -> Tokenizer:
    return Tokenizer.ascii() if cfg.data.gsm_train else Tokenizer.synthetic()


def _load_data(cfg: ExperimentConfig, seed: int):
    d = seed_dir(cfg, seed) / "data"
    if not (d / "train.jsonl").exists():
        stage_data(cfg, seed)
    tok = _tokenizer(cfg)
    train = drop_overlong(read_jsonl(d / "train.jsonl", tok), cfg.model.max_seq_len)
    return tok, train, read_jsonl(d / "eval.jsonl", tok)


def _train_cfg(base: TrainConfig, seed: int, offset: int) -> TrainConfig:
    return TrainConfig(**{**asdict(base), "seed": base.seed + 1000 * seed + offset})


def stage_pretrain(cfg: ExperimentConfig, seed: int) -> Path:
    tok, train, _ = _load_data(cfg, seed)
    mcfg = cfg.model
    if mcfg.vocab_size < len(tok):
        raise ValueError("vocabulary smaller than the tokenizer")
    model = TinyLM(mcfg).init_weights(seed)
    curve = pretrain(model, train, _train_cfg(cfg.pretrain, seed, 0), cfg.direct_fraction)
    out = seed_dir(cfg, seed) / "base"
    save_model(model, out, {"stage": "pretrain", "seed": seed})
    write_curve(seed_dir(cfg, seed) / "curves" / "pretrain.csv", curve)
    return out


def _base(cfg: ExperimentConfig, seed: int) -> TinyLM:
    path = seed_dir(cfg, seed) / "base"
    if not with_ext(path, ".json").exists():
        stage_pretrain(cfg, seed)
    model, _ = load_model(path)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


BASELINE_KIND = {"none_r0": "r0", "cot_r1": "r1", "pause": "pause"}


def stage_baseline(cfg: ExperimentConfig, seed: int, method: str) -> Path:
    kind = BASELINE_KIND[method]
    tok, train, _ = _load_data(cfg, seed)
    model = _base(cfg, seed)
    r = cfg.pause_r if kind == "pause" else 0.0
    adapter, pause_embed, curve = train_baseline(kind, model, train, tok, _train_cfg(cfg.baseline, seed, 10),
                                                 cfg.baseline_rank, r)
    path = seed_dir(cfg, seed) / f"baseline-{kind}"
    meta = {"stage": f"baseline-{kind}", "r": r}
    if kind == "pause":
        meta["k"] = max(1, round(statistics.fmean(target_length(r, i.m) for i in train)))
        save_tensors(path.with_name(path.name + "-embed"), {"pause": pause_embed})
    save_adapters(path, {kind: adapter}, meta)
    write_curve(seed_dir(cfg, seed) / "curves" / f"baseline-{kind}.csv", curve)
    return path


def _ccot_path(cfg: ExperimentConfig, seed: int, r: float, l: int, part: str) -> Path:
    return seed_dir(cfg, seed) / f"ccot-r{_r_tag(r)}-l{l}-{part}"


def stage_phi(cfg: ExperimentConfig, seed: int, r: float, l: int) -> Path:
    _, train, _ = _load_data(cfg, seed)
    model = _base(cfg, seed)
    spec = CompressionSpec(r=r, layer=l)
    spec.check(model.cfg.num_layers)
    gold = build_gold(train, model, spec)
    phi = LoraAdapter(model.cfg.hidden_dim, model.cfg.num_layers, cfg.phi_rank, seed=seed + 21)
    curves = train_phi(model, phi, train, gold, l, _train_cfg(cfg.phi, seed, 20))
    path = _ccot_path(cfg, seed, r, l, "phi")
    save_adapters(path, {"phi": phi}, {"stage": "train-phi", "r": r, "l": l})
    for i, c in curves.items():
        write_curve(seed_dir(cfg, seed) / "curves" / f"ccot-r{_r_tag(r)}-l{l}-phi{i}.csv", c)
    return path


def stage_psi(cfg: ExperimentConfig, seed: int, r: float, l: int) -> Path:
    _, train, _ = _load_data(cfg, seed)
    model = _base(cfg, seed)
    phi_path = _ccot_path(cfg, seed, r, l, "phi")
    if not with_ext(phi_path, ".json").exists():
        stage_phi(cfg, seed, r, l)
    phi = load_adapters(phi_path)[0]["phi"]
    psi = LoraAdapter(model.cfg.hidden_dim, model.cfg.num_layers, cfg.psi_rank, seed=seed + 31)
    spec = CompressionSpec(r=r, layer=l)
    curve = train_psi(model, phi, psi, train, spec, _train_cfg(cfg.psi, seed, 30))
    feats, labels = end_training_data(model, {"phi": phi}, train, spec)
    end = train_end(feats, labels, seed=seed, threshold=cfg.end_threshold)
    path = _ccot_path(cfg, seed, r, l, "psi")
    save_adapters(path, {"phi": phi, "psi": psi}, {"stage": "train-psi", "r": r, "l": l})
    if end is not None:
        save_tensors(_ccot_path(cfg, seed, r, l, "end"), dict(end.state_dict()), {"threshold": end.threshold})
    write_curve(seed_dir(cfg, seed) / "curves" / f"ccot-r{_r_tag(r)}-l{l}-psi.csv", curve)
    return path


def _load_end(path: Path, dim: int) -> EndClassifier | None:
    if not with_ext(path, ".json").exists():
        return None
    tensors, meta = load_tensors(path)
    end = EndClassifier(dim, meta["threshold"])
    end.load_state_dict(tensors)
    return end


# -- evaluation -----------------------------------------------------------------

def _files(path: Path) -> list[str]:
    return [str(with_ext(path, s)) for s in (".json", ".bin") if with_ext(path, s).exists()]


def load_generator(cfg: ExperimentConfig, seed: int, method: str, r: float | None = None, l: int | None = None,
                   train_missing: bool = True):
    """Return ``(generate(query), r, l, checkpoint files)`` for one method,
    training missing stages first when ``train_missing``."""
    tok = _tokenizer(cfg)
    model = _base(cfg, seed)
    arts = _files(seed_dir(cfg, seed) / "base")
    if method == "ccot":
        r = cfg.ratios[0] if r is None else r
        l = cfg.layer if l is None else l
        psi_path = _ccot_path(cfg, seed, r, l, "psi")
        if not with_ext(psi_path, ".json").exists():
            if not train_missing:
                raise FileNotFoundError(f"missing checkpoint {psi_path}.json")
            stage_psi(cfg, seed, r, l)
        adapters, _ = load_adapters(psi_path)
        end_path = _ccot_path(cfg, seed, r, l, "end")
        end = _load_end(end_path, model.cfg.hidden_dim)
        spec = CompressionSpec(r=r, layer=l)
        gen = lambda q: ccot_generate(model, q, tok, adapters, end, spec)
        arts += _files(psi_path) + _files(end_path)
    else:
        kind = BASELINE_KIND[method]
        path = seed_dir(cfg, seed) / f"baseline-{kind}"
        if not with_ext(path, ".json").exists():
            if not train_missing:
                raise FileNotFoundError(f"missing checkpoint {path}.json")
            stage_baseline(cfg, seed, method)
        adapters, meta = load_adapters(path)
        arts += _files(path)
        r, l = meta["r"] if kind != "r1" else 1.0, None
        if kind == "r0":
            gen = lambda q: direct_generate(model, q, tok, adapters, "r0")
        elif kind == "r1":
            gen = lambda q: cot_generate(model, q, tok, adapters, "r1")
        else:
            emb_path = path.with_name(path.name + "-embed")
            pause_embed = load_tensors(emb_path)[0]["pause"]
            arts += _files(emb_path)
            k = meta["k"]
            gen = lambda q: pause_generate(model, q, tok, adapters, pause_embed, k)
    return gen, r, l, arts


def evaluate(cfg: ExperimentConfig, seed: int, method: str, r: float | None = None, l: int | None = None,
             train_missing: bool = True) -> tuple[ReportRow, list[str]]:
    """EM over the whole eval set, decode time over its first
    ``timing_instances`` (``timing_repetitions`` runs after warmup)."""
    tok, _, evalset = _load_data(cfg, seed)
    gen, r, l, arts = load_generator(cfg, seed, method, r, l, train_missing)
    correct = 0
    cont = []
    for inst in evalset:
        res: GenerationResult = gen(inst.query)
        correct += normalize_answer(res.text(tok)) == normalize_answer(inst.answer_text)
        cont.append(res.contemplation)
    times = []
    for inst in evalset[: cfg.timing_instances]:
        mean, _, _ = timed(lambda: gen(inst.query), cfg.timing_repetitions, cfg.timing_warmup)
        times.append(mean)
    n = len(evalset)
    row = ReportRow(method, float(r), l, correct / n if n else 0.0,
                    statistics.fmean(times) if times else 0.0, statistics.fmean(cont) if cont else 0.0, n, seed)
    log.info("eval %s r=%s l=%s: em %.4f, %.4f s, %.2f tokens", method, r, l, row.em, row.decode_s, row.cont_tokens)
    return row, arts


def _guarded(report: RunReport, method: str, r, l, seed: int, fn) -> None:
    try:
        row, arts = fn()
        report.rows.append(row)
        report.artifacts[row_key(row)] = arts
    except Exception as exc:  # a stage failed: keep going, mark the row
        log.exception("stage failed for %s r=%s l=%s seed=%d", method, r, l, seed)
        row = ReportRow(method, float(r) if r is not None else float("nan"), l, None, None, None, 0, seed)
        report.rows.append(row)
        report.failures.append(f"{row_key(row)}: {type(exc).__name__}: {exc}")


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Generate data, pretrain the base, train each method's stages, then
    evaluate. Rows follow the order of ``cfg.methods`` (ccot once per ratio)."""
    cfg.validate()
    report = RunReport()
    for seed in cfg.seeds:
        torch.manual_seed(seed)
        stage_data(cfg, seed)
        stage_pretrain(cfg, seed)
        for method in cfg.methods:
            if method == "ccot":
                for r in cfg.ratios:
                    _guarded(report, method, r, cfg.layer, seed, lambda r=r: evaluate(cfg, seed, "ccot", r, cfg.layer))
            else:
                r = {"none_r0": 0.0, "cot_r1": 1.0, "pause": cfg.pause_r}[method]
                _guarded(report, method, r, None, seed, lambda m=method: evaluate(cfg, seed, m))
    return report


def run_ablation_l(cfg: ExperimentConfig) -> RunReport:
    """One CCoT row per autoregressive layer in ``cfg.ablate_layers`` at
    ``cfg.ablate_r``, plus the no-contemplation baseline."""
    if not cfg.ablate_layers:
        raise ValueError("config lists no layers to ablate")
    for l in cfg.ablate_layers:
        CompressionSpec(r=cfg.ablate_r, layer=l).check(cfg.model.num_layers)
    report = RunReport()
    for seed in cfg.seeds:
        _load_data(cfg, seed)
        _base(cfg, seed)
        for l in cfg.ablate_layers:
            _guarded(report, "ccot", cfg.ablate_r, l, seed, lambda l=l: evaluate(cfg, seed, "ccot", cfg.ablate_r, l))
        _guarded(report, "none_r0", 0.0, None, seed, lambda: evaluate(cfg, seed, "none_r0"))
    return report


def run_ablation_r(cfg: ExperimentConfig) -> RunReport:
    """One CCoT row per ratio in ``cfg.ratios`` at ``cfg.layer``."""
    cfg.validate()
    report = RunReport()
    for seed in cfg.seeds:
        _load_data(cfg, seed)
        _base(cfg, seed)
        for r in cfg.ratios:
            _guarded(report, "ccot", r, cfg.layer, seed, lambda r=r: evaluate(cfg, seed, "ccot", r, cfg.layer))
    return report


# -- reports ------------------------------------------------------------------

def report_rows_json(report: RunReport) -> dict:
    return {"columns": list(COLUMNS), "rows": [dict(zip(COLUMNS, row.cells())) for row in report.rows]}


def reference_for(row: ReportRow) -> tuple[float, float] | None:
    for (method, r, _), val in REFERENCE_ROWS.items():
        if row.method == method and row.r == r:
            return val
    return None


def format_table(report: RunReport, reference: bool = True) -> str:
    head = list(COLUMNS) + (["ref_em", "ref_s"] if reference else [])
    lines = [head]
    for row in report.rows:
        cells = row.cells()
        if reference:
            ref = reference_for(row)
            cells += [str(ref[0]), str(ref[1])] if ref else ["", ""]
        lines.append(cells)
    widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
    out = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines]
    if reference:
        out.append(f"ref_* columns: {REFERENCE_LABEL}")
    if report.failures:
        out += [f"FAILED {f}" for f in report.failures]
    return "\n".join(out)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def emit_report(report: RunReport, out_dir: str | Path, formats: Sequence[str] = ("csv", "json"),
                name: str = "report", echo: bool = False) -> list[Path]:
    """Write CSV and/or JSON with identical content plus a provenance manifest
    mapping every row to the checkpoint files it was evaluated from."""
    if not report.rows:
        raise ValueError("report has no rows")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    try:
        if "csv" in formats:
            p = out_dir / f"{name}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(COLUMNS)
                for row in report.rows:
                    w.writerow(row.cells())
            written.append(p)
        if "json" in formats:
            p = out_dir / f"{name}.json"
            p.write_text(json.dumps(report_rows_json(report), indent=1) + "\n")
            written.append(p)
        ref = out_dir / "reference.json"
        ref.write_text(json.dumps({
            "label": REFERENCE_LABEL,
            "rows": [{"method": m, "r": r, "l": l, "em": em, "decode_s": s} for (m, r, l), (em, s) in REFERENCE_ROWS.items()],
            "layer_rows": [{"l": l, "em": em} for l, em in REFERENCE_LAYER_ROWS.items()],
        }, indent=1) + "\n")
        manifest = out_dir / f"{name}-manifest.json"
        manifest.write_text(json.dumps({
            key: {f: sha256_file(f) for f in files} for key, files in report.artifacts.items()
        }, indent=1, sort_keys=True) + "\n")
        written += [ref, manifest]
        if report.failures:
            (out_dir / f"{name}-failures.txt").write_text("\n".join(report.failures) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc}") from exc
    if echo or "table" in formats:
        print(format_table(report))
    return written


def read_report_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_report_json(path: str | Path) -> list[dict[str, str]]:
    return json.loads(Path(path).read_text())["rows"]


def non_timing_view(rows: Sequence[dict[str, str]]) -> list[dict[str, str]]:
    return [{k: v for k, v in row.items() if k not in TIMING_COLUMNS} for row in rows]


def timing_close(a: Sequence[dict[str, str]], b: Sequence[dict[str, str]], rel_tol: float = 1.0) -> bool:
    """Tolerance flag for timing columns: within ``rel_tol`` relative difference."""
    for x, y in zip(a, b):
        for c in TIMING_COLUMNS:
            if x[c] and y[c] and not math.isclose(float(x[c]), float(y[c]), rel_tol=rel_tol):
                return False
    return True


def expressivity_report(out_dir: str | Path | None = None, q: int = 5) -> str:
    text = expressivity.summary_csv(expressivity.realizability_sweep(q))
    if out_dir is not None:
        p = Path(out_dir)
        p.mkdir(parents=True, exist_ok=True)
        (p / "expressivity.csv").write_text(text)
    return text
