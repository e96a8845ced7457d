"""Config-driven pipelines shared by the command line and the acceptance tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import data_io, diffnet, reconstruct, trainer, verify
from .data_io import LabeledDataset
from .diffnet import NetworkSpec
from .reconstruct import ReconstructConfig
from .seeding import derive_seed
from .trainer import TrainConfig, UnlearnRequest
from .verify import SsimConfig, VerifyConfig


class ConfigError(ValueError):
    pass


def _bundled(name: str) -> str:
    return str(resources.files("kktunlearn") / "data" / name)


@dataclass(frozen=True)
class DatasetConfig:
    images: str = ""
    labels: str = ""
    class_a: int = 3
    class_b: int = 8
    n_per_class: int = 25
    downsample: int = 14  # 0 keeps the native resolution
    center: bool = True


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (256,)


@dataclass(frozen=True)
class UnlearnConfig:
    forget: tuple = ()
    forget_count: int = 5
    mode: str = "retrain"
    finetune_steps: int = 200


@dataclass(frozen=True)
class RobustnessConfig:
    prune_fraction: float = 0.2
    finetune_steps: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    reconstruct: ReconstructConfig = ReconstructConfig()
    verify: VerifyConfig = VerifyConfig()
    unlearn: UnlearnConfig = UnlearnConfig()
    robustness: RobustnessConfig = RobustnessConfig()
    m_explicit: bool = False

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


# Config file parsing

_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "reconstruct": ReconstructConfig,
    "unlearn": UnlearnConfig,
    "robustness": RobustnessConfig,
}
# sub-seeds come from the global seed, so per-section seeds are not settable
_HIDDEN_KEYS = {"seed"}


def _convert(key: str, raw: str, type_text: str, default):
    text = raw.strip()
    if "None" in type_text and text.lower() == "none":
        return None
    try:
        if isinstance(default, bool) or type_text.startswith("bool"):
            if text.lower() in ("true", "yes", "1"):
                return True
            if text.lower() in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple) or type_text.startswith("tuple"):
            return tuple(int(t) for t in text.replace(",", " ").split())
        if isinstance(default, int) or type_text.startswith("int"):
            return int(text)
        if isinstance(default, float) or type_text.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def _fields_of(cls):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in _HIDDEN_KEYS}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse ``section.key = value`` lines; unknown keys are errors."""
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    verify_kw: dict = {}
    ssim_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        section, dot, name = key.partition(".")
        if not dot:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if section == "experiment" and name in ("seed", "out"):
            top[name] = int(value) if name == "seed" else value.strip()
            continue
        if section == "verify" and name == "eta":
            verify_kw["eta"] = _convert(key, value, "float", 0.15)
            continue
        if section == "ssim" and name in _fields_of(SsimConfig):
            f = _fields_of(SsimConfig)[name]
            ssim_kw[name] = _convert(key, value, str(f.type), f.default)
            continue
        cls = _SECTIONS.get(section)
        if cls is None or name not in _fields_of(cls):
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        f = _fields_of(cls)[name]
        updates[section][name] = _convert(key, value, str(f.type), f.default)

    base = ExperimentConfig()
    try:
        kw = {name: replace(getattr(base, name), **updates[name]) for name in _SECTIONS}
        vcfg = VerifyConfig(eta=verify_kw.get("eta", 0.15), ssim=SsimConfig(**ssim_kw))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{source}: {e}") from None
    return ExperimentConfig(verify=vcfg, m_explicit="m" in updates["reconstruct"], **top, **kw)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


# Pipeline pieces

def build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    dc = cfg.dataset
    images = dc.images or _bundled("mnist5k-images-idx3-ubyte.gz")
    labels = dc.labels or _bundled("mnist5k-labels-idx1-ubyte.gz")
    full = data_io.load_idx(images, labels)
    return data_io.make_binary_subset(
        full, dc.class_a, dc.class_b, dc.n_per_class,
        seed=derive_seed(cfg.seed, "dataset"),
        downsample_to=dc.downsample or None,
    )


def build_spec(cfg: ExperimentConfig, ds: LabeledDataset) -> NetworkSpec:
    offset = tuple(ds.samples.mean(axis=0)) if cfg.dataset.center else None
    out_dim = 1 if ds.num_classes == 2 else ds.num_classes
    return NetworkSpec(ds.d, tuple(cfg.model.hidden), out_dim, offset)


def train_config(cfg: ExperimentConfig, tag: str = "train") -> TrainConfig:
    return replace(cfg.train, seed=derive_seed(cfg.seed, tag))


def finetune_config(cfg: ExperimentConfig) -> TrainConfig:
    # fixed-length continuation of the training run, no early stop
    return replace(train_config(cfg), margin_stop=None)


def reconstruct_config(cfg: ExperimentConfig, n: int) -> ReconstructConfig:
    rc = cfg.reconstruct if cfg.m_explicit else replace(cfg.reconstruct, m=2 * n)
    return replace(rc, seed=derive_seed(cfg.seed, "reconstruct"))


def forget_indices(cfg: ExperimentConfig, n: int) -> list[int]:
    if cfg.unlearn.forget:
        return sorted(int(i) for i in cfg.unlearn.forget)
    rng = np.random.default_rng(derive_seed(cfg.seed, "forget"))
    return sorted(int(i) for i in rng.choice(n, size=cfg.unlearn.forget_count, replace=False))


def best_matches(ds: LabeledDataset, cands, ssim_cfg: SsimConfig = SsimConfig()):
    """Best SSIM of every training image against the candidates, and the matching index."""
    return verify.match_all(ds.images(), cands.candidates.reshape(-1, *ds.shape), ssim_cfg)


@dataclass
class Recovered:
    cands: reconstruct.CandidateSet
    trajectory: list
    best: np.ndarray
    index: np.ndarray
    no_prior: reconstruct.CandidateSet | None = None
    best_no_prior: np.ndarray | None = None


def recover_and_match(cfg: ExperimentConfig, spec, theta, ds, ablation: bool = False) -> Recovered:
    rc = reconstruct_config(cfg, ds.n)
    phase1 = reconstruct.run_phase1(spec, theta, rc)
    cands, traj = reconstruct.recover(spec, theta, rc, phase1=phase1)
    best, idx = best_matches(ds, cands, cfg.verify.ssim)
    rec = Recovered(cands, traj, best, idx)
    if ablation:
        plain, _ = reconstruct.recover(spec, theta, replace(rc, alpha3=0.0), phase1=phase1)
        rec.no_prior = plain
        rec.best_no_prior = best_matches(ds, plain, cfg.verify.ssim)[0]
    return rec


@dataclass
class SeedRun:
    """Everything the acceptance criteria look at for one seed."""

    cfg: ExperimentConfig
    ds: LabeledDataset
    spec: NetworkSpec
    theta: np.ndarray
    train_report: trainer.TrainReport
    forget: list[int]
    pre: Recovered
    post: Recovered | None = None
    theta_post: np.ndarray | None = None
    report: verify.VerificationReport | None = None
    dishonest: verify.VerificationReport | None = None
    extra: dict = field(default_factory=dict)

    @property
    def forget_mask(self) -> np.ndarray:
        mask = np.zeros(self.ds.n, dtype=bool)
        mask[self.forget] = True
        return mask


def _boundary(spec, theta, ds) -> np.ndarray:
    return diffnet.margins(spec, theta, ds.samples, ds.labels).margins


def prepare(cfg: ExperimentConfig, ablation: bool = False) -> SeedRun:
    ds = build_dataset(cfg)
    spec = build_spec(cfg, ds)
    theta, rep = trainer.train(spec, ds, train_config(cfg))
    pre = recover_and_match(cfg, spec, theta, ds, ablation=ablation)
    return SeedRun(cfg, ds, spec, theta, rep, forget_indices(cfg, ds.n), pre)


def run_sample_unlearning(cfg: ExperimentConfig, ablation: bool = False, base: SeedRun | None = None) -> SeedRun:
    run = base or prepare(cfg, ablation)
    req = UnlearnRequest(frozenset(run.forget), cfg.unlearn.mode)
    theta_u, _ = trainer.unlearn(run.spec, run.theta, run.ds, req, train_config(cfg),
                                 finetune_steps=cfg.unlearn.finetune_steps)
    post = recover_and_match(cfg, run.spec, theta_u, run.ds)
    imgs = run.ds.images()
    bd = _boundary(run.spec, run.theta, run.ds)
    run.post, run.theta_post = post, theta_u
    run.report = verify.verify_unlearning(run.pre.cands, post.cands, imgs, run.forget_mask, cfg.verify, boundary=bd)
    run.dishonest = verify.verify_unlearning(run.pre.cands, run.pre.cands, imgs, run.forget_mask, cfg.verify,
                                             boundary=bd)
    return run


def run_prune_finetune(cfg: ExperimentConfig, run: SeedRun) -> Recovered:
    fraction = cfg.robustness.prune_fraction
    pruned = trainer.prune_random(run.spec, run.theta, fraction, derive_seed(cfg.seed, "prune"))
    tuned, _ = trainer.finetune(run.spec, pruned, run.ds, finetune_config(cfg), cfg.robustness.finetune_steps)
    run.extra["prune_acc"] = (trainer.accuracy(run.spec, run.theta, run.ds),
                              trainer.accuracy(run.spec, pruned, run.ds),
                              trainer.accuracy(run.spec, tuned, run.ds))
    return recover_and_match(cfg, run.spec, tuned, run.ds)


def run_finetune_only(cfg: ExperimentConfig, run: SeedRun) -> Recovered:
    tuned, _ = trainer.finetune(run.spec, run.theta, run.ds, finetune_config(cfg), cfg.robustness.finetune_steps)
    return recover_and_match(cfg, run.spec, tuned, run.ds)


def run_unlearn_finetune(cfg: ExperimentConfig, run: SeedRun) -> Recovered:
    req = UnlearnRequest(frozenset(run.forget), "retrain")
    theta_u, _ = trainer.unlearn(run.spec, run.theta, run.ds, req, train_config(cfg))
    keep = [i for i in range(run.ds.n) if i not in set(run.forget)]
    tuned, _ = trainer.finetune(run.spec, theta_u, run.ds.subset(keep), finetune_config(cfg),
                                cfg.robustness.finetune_steps)
    return recover_and_match(cfg, run.spec, tuned, run.ds)


def run_relabel(cfg: ExperimentConfig, run: SeedRun) -> Recovered:
    req = UnlearnRequest(frozenset(run.forget), "relabel-finetune")
    tuned, rep = trainer.unlearn(run.spec, run.theta, run.ds, req, finetune_config(cfg),
                                 finetune_steps=cfg.unlearn.finetune_steps)
    run.extra["relabeled"] = rep.relabeled
    return recover_and_match(cfg, run.spec, tuned, run.ds)


# Suites writing delimited reports

SUITES = ("sample-unlearning", "robustness", "range-ablation", "relabel-check")


def _summary(path: Path, pairs):
    data_io.write_csv(path, ["metric", "value"], pairs)


def _ssim_rows(ds, bd, columns):
    rows = []
    for i in range(ds.n):
        rows.append([i, int(ds.labels[i]), float(bd[i])] + [float(c[i]) for c in columns])
    return rows


def suite_sample_unlearning(cfg: ExperimentConfig, out: Path) -> dict:
    run = run_sample_unlearning(cfg)
    data_io.export_report(run.report, out / "report.csv")
    data_io.export_report(run.dishonest, out / "report_unchanged_model.csv")
    rep = run.report
    pairs = [
        ("n_train", run.ds.n),
        ("forget", " ".join(str(i) for i in run.forget)),
        ("mean_D_forget", rep.mean_D_forget),
        ("mean_D_retain", rep.mean_D_retain),
        ("decision", rep.decision),
        ("decision_unchanged_model", run.dishonest.decision),
    ]
    _summary(out / "summary.csv", pairs)
    return dict(pairs)


def suite_robustness(cfg: ExperimentConfig, out: Path) -> dict:
    run = prepare(cfg)
    bd = _boundary(run.spec, run.theta, run.ds)
    eta = cfg.verify.eta
    settings = {
        "prune": run_prune_finetune,
        "finetune": run_finetune_only,
        "unlearn-finetune": run_unlearn_finetune,
    }
    result = {"present_original": int((run.pre.best > eta).sum())}
    for name, fn in settings.items():
        rec = fn(cfg, run)
        data_io.write_csv(
            out / f"robustness_{name}.csv",
            ["sample", "label", "boundary_distance", "ssim_original", "ssim_modified"],
            _ssim_rows(run.ds, bd, [run.pre.best, rec.best]),
        )
        result[f"present_{name}"] = int((rec.best > eta).sum())
    _summary(out / "summary.csv", list(result.items()))
    return result


def suite_range_ablation(cfg: ExperimentConfig, out: Path) -> dict:
    run = prepare(cfg, ablation=True)
    bd = _boundary(run.spec, run.theta, run.ds)
    data_io.write_csv(
        out / "range_ablation.csv",
        ["sample", "label", "boundary_distance", "ssim_with_prior", "ssim_without_prior"],
        _ssim_rows(run.ds, bd, [run.pre.best, run.pre.best_no_prior]),
    )
    result = {
        "count_with_prior_above_0.3": int((run.pre.best > 0.3).sum()),
        "count_without_prior_above_0.3": int((run.pre.best_no_prior > 0.3).sum()),
    }
    _summary(out / "summary.csv", list(result.items()))
    return result


def suite_relabel_check(cfg: ExperimentConfig, out: Path) -> dict:
    run = prepare(cfg)
    rec = run_relabel(cfg, run)
    eta = cfg.verify.eta
    F = run.forget
    data_io.write_csv(
        out / "relabel_check.csv",
        ["sample", "original_label", "new_label", "ssim_before", "ssim_after"],
        [[i, int(run.ds.labels[i]), run.extra["relabeled"][i], float(run.pre.best[i]), float(rec.best[i])]
         for i in F],
    )
    before = int((run.pre.best[F] > eta).sum())
    after = int((rec.best[F] > eta).sum())
    result = {"present_before": before, "present_after": after, "change": after - before}
    _summary(out / "summary.csv", list(result.items()))
    return result


def run_suite(name: str, cfg: ExperimentConfig, out) -> dict:
    fns = {
        "sample-unlearning": suite_sample_unlearning,
        "robustness": suite_robustness,
        "range-ablation": suite_range_ablation,
        "relabel-check": suite_relabel_check,
    }
    if name not in fns:
        raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    out = Path(out) / name
    out.mkdir(parents=True, exist_ok=True)
    return fns[name](cfg, out)
