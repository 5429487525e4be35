"""
Experiment commands: dataset generation, training, evaluation, depth sweeps
and the exact-prox network export.

Every command takes a validated ``ExperimentConfig`` and explicit
directories; provenance is carried by config hashes written next to each
artifact and re-checked before anything is reused.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import hashlib
import logging
import shutil

import numpy as np

from ..datagen import BlockImageParams, Dataset, generate_dataset, generate_deblur_dataset
from ..errors import ArtifactError, ConfigValidationError, DivergenceError, GdnError, ProvenanceError
from ..fnn import FnnParams, Mask, apply_mask, build_exact_prox_net, match_exact_prox_layout
from ..forward_model import GaussianLinearModel, build_blur_matrix, default_step, gaussian_design
from ..gdn import Estimator, FnnBaseline, GdnModel
from ..numerics import make_rng, rand_orthogonal
from ..pgd_oracle import ContractionEstimate, depth_rule, estimate_contraction, solve_g_batch
from ..regularizer import ElasticNet, OrthoRegularizer
from ..sampler import (
    ChainMetrics,
    ChainState,
    PosteriorSpec,
    SamplerCounters,
    SpikeSlabPrior,
    init_chain,
    posterior_mean_prediction,
    posterior_test_error,
    run_chain,
)
from ..schemas.contracts import DataKind, EvalTarget, ExperimentConfig, GammaMode, Likelihood, config_hash
from . import storage
from .audit import JournalEventType, RunJournal


logger = logging.getLogger(__name__)

# Philox stream ids (first spawn-key entry)
STREAM_OPERATOR = 0
STREAM_TRAIN = 1
STREAM_TEST = 2
STREAM_CHAIN = 3

QUANTILES = (("min", 0.0), ("q25", 0.25), ("median", 0.5), ("q75", 0.75), ("max", 1.0))


# ============= Problem construction =============

@dataclass(eq=False)
class Problem:
    """Forward model, regularizer and unrolling step size of a config."""
    fm: GaussianLinearModel
    reg: OrthoRegularizer
    gamma: float
    gamma_multiplier: float


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Rebuild the (seeded) operators of a config."""
    data = cfg.data
    rng = make_rng(cfg.seed, STREAM_OPERATOR)
    if data.blur:
        A = build_blur_matrix(data.image_height, data.image_width, data.blur_variance)
    else:
        A = gaussian_design(data.d_y, data.d_x, rng)
    B = rand_orthogonal(data.d_x, rng) if data.ortho_B else None
    fm = GaussianLinearModel(A, data.v2)
    reg = OrthoRegularizer(ElasticNet(data.lambda1, data.lambda2), B)
    model = cfg.model
    if model.gamma_mode == GammaMode.EXPLICIT:
        gamma, multiplier = float(model.gamma), model.gamma_multiplier
    elif model.gamma_mode == GammaMode.AUTO_MULTIPLIER:
        gamma, multiplier = default_step(fm, model.gamma_multiplier), model.gamma_multiplier
    else:
        gamma, multiplier = default_step(fm), 1.0
    return Problem(fm=fm, reg=reg, gamma=gamma, gamma_multiplier=multiplier)


def build_estimator(cfg: ExperimentConfig, problem: Problem, baseline: bool = False) -> Estimator:
    """GDN of the config, or the no-physics baseline."""
    if baseline:
        return FnnBaseline(cfg.model.baseline_specs(), cfg.data.d_y)
    x0 = np.asarray(cfg.model.x0, dtype=np.float64) if cfg.model.x0 is not None else None
    return GdnModel(
        fm=problem.fm,
        specs=cfg.model.specs(),
        gamma=problem.gamma,
        depth_unroll=cfg.model.depth_unroll,
        x0=x0,
        gamma_multiplier=problem.gamma_multiplier,
    )


def build_datasets(cfg: ExperimentConfig, problem: Problem) -> Tuple[Dataset, Dataset]:
    """Train and test sets from disjoint random streams."""
    out = []
    for split, stream, n in (("train", STREAM_TRAIN, cfg.data.n_train), ("test", STREAM_TEST, cfg.data.n_test)):
        rng = make_rng(cfg.seed, stream)
        meta = {"seed": cfg.seed, "split": split, "config_name": cfg.name}
        if cfg.data.kind == DataKind.BLOCK_IMAGES:
            params = BlockImageParams(**cfg.data.blocks.model_dump())
            out.append(generate_deblur_dataset(problem.fm, n, rng, params, meta))
        else:
            out.append(generate_dataset(problem.fm, problem.reg, n, rng, meta))
    return out[0], out[1]


def run_name(cfg: ExperimentConfig, baseline: bool = False) -> str:
    return "fnn" if baseline else f"gdn_d{cfg.model.depth_unroll}"


def run_identity(cfg: ExperimentConfig, baseline: bool, dataset_hash: str) -> str:
    """Hash tying a chain to its config, estimator kind and training data."""
    kind = "fnn" if baseline else "gdn"
    return hashlib.sha256(f"{config_hash(cfg, 'run')}:{kind}:{dataset_hash}".encode()).hexdigest()


def _chain_rng(cfg: ExperimentConfig, baseline: bool):
    return make_rng(cfg.seed, STREAM_CHAIN, int(baseline), cfg.model.depth_unroll)


def _journal(journal: Optional[RunJournal], out: Path) -> RunJournal:
    return journal if journal is not None else RunJournal(Path(out) / "journal.log")


# ============= gen =============

@dataclass
class GenResult:
    data_dir: Path
    data_hash: str
    train_hash: str
    test_hash: str
    n_train: int
    n_test: int


def cmd_gen(cfg: ExperimentConfig, data_dir: Path, journal: Optional[RunJournal] = None) -> GenResult:
    """
    Generate and write the train and test sets.

    Raises:
        ArtifactError: If the output directory is not writable
    """
    data_dir = Path(data_dir)
    journal = _journal(journal, data_dir)
    problem = build_problem(cfg)
    train, test = build_datasets(cfg, problem)
    data_hash = config_hash(cfg, "data")
    try:
        storage.save_dataset(data_dir / "train", train, data_hash)
        storage.save_dataset(data_dir / "test", test, data_hash)
    except OSError as e:
        raise ArtifactError(f"cannot write dataset to {data_dir}: {e}", {"path": str(data_dir)}) from e
    result = GenResult(data_dir, data_hash, train.content_hash(), test.content_hash(), train.n, test.n)
    journal.record(
        JournalEventType.DATASET_GENERATED, cfg.name, data_hash,
        train_hash=result.train_hash, test_hash=result.test_hash, n_train=train.n, n_test=test.n,
    )
    logger.info(f"Generated {train.n} training and {test.n} test pairs in {data_dir}")
    return result


def load_split(cfg: ExperimentConfig, data_dir: Path, split: str) -> Dataset:
    """Load one split, checking it was generated from this config."""
    path = Path(data_dir) / split
    if not (path / "data.meta.json").exists():
        raise ArtifactError(f"no {split} dataset in {data_dir}; run 'gen' first", {"path": str(path)})
    return storage.load_dataset(path, config_hash(cfg, "data"))


def ensure_oracle(
    cfg: ExperimentConfig,
    problem: Problem,
    ds: Dataset,
    directory: Path,
    journal: Optional[RunJournal] = None,
) -> np.ndarray:
    """Cached oracle values g(y) for a dataset, solving and caching them on first use."""
    G = storage.load_oracle(directory, ds.content_hash())
    if G is not None:
        return G
    logger.info(f"Solving oracle for {ds.n} observations in {directory}")
    G = solve_g_batch(
        problem.fm, problem.reg, problem.gamma, ds.Y,
        tol=cfg.eval.oracle_tol, max_iter=cfg.eval.oracle_max_iter,
    )
    storage.save_oracle(directory, G, ds.content_hash(), {"tol": cfg.eval.oracle_tol, "gamma": problem.gamma})
    if journal is not None:
        journal.record(JournalEventType.ORACLE_CACHED, cfg.name, ds.content_hash(), rows=ds.n, path=str(directory))
    return G


def eval_targets(
    cfg: ExperimentConfig, problem: Problem, ds: Dataset, directory: Path, journal: Optional[RunJournal] = None
) -> np.ndarray:
    if cfg.eval.target == EvalTarget.TRUTH:
        return ds.X
    return ensure_oracle(cfg, problem, ds, directory, journal)


# ============= train =============

@dataclass
class TrainResult:
    run_dir: Path
    final_state: ChainState
    counters: SamplerCounters
    retained: int
    resumed_from: Optional[int] = None


def _write_run_manifest(run_dir: Path, cfg: ExperimentConfig, baseline: bool, identity: str, dataset_hash: str):
    storage.write_summary(
        Path(run_dir) / "run.json",
        {
            "config_hash": identity,
            "dataset_hash": dataset_hash,
            "baseline": baseline,
            "depth_unroll": 0 if baseline else cfg.model.depth_unroll,
            "config": cfg.model_dump(mode="json"),
        },
    )


def _check_run(run_dir: Path, identity: str) -> Dict[str, Any]:
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise ArtifactError(f"{run_dir} holds no run (run.json missing)", {"path": str(run_dir)})
    manifest = storage.read_summary(path)
    if manifest.get("config_hash") != identity:
        raise ProvenanceError(
            f"run in {run_dir} was produced under another config or dataset",
            {"expected": identity, "found": manifest.get("config_hash")},
        )
    return manifest


def cmd_train(
    cfg: ExperimentConfig,
    data_dir: Path,
    run_dir: Path,
    baseline: bool = False,
    resume: bool = False,
    journal: Optional[RunJournal] = None,
) -> TrainResult:
    """
    Run the sampler for ``cfg.sampler.iters`` iterations.

    Metrics are appended every ``thin`` iterations, retained samples go to
    ``samples/`` and a checkpoint is written every ``checkpoint_every``
    iterations and at the end. On divergence the last checkpoint is kept
    and the error is re-raised.

    Raises:
        ProvenanceError: Dataset or checkpoint from another config
        DivergenceError: Sampler produced non-finite values
    """
    run_dir = Path(run_dir)
    journal = _journal(journal, run_dir)
    train = load_split(cfg, data_dir, "train")
    test = load_split(cfg, data_dir, "test")
    problem = build_problem(cfg)
    model = build_estimator(cfg, problem, baseline)
    q = sum(int(np.prod(s)) for s in model.param_shapes())
    prior = SpikeSlabPrior(u=cfg.prior.u, rho0=cfg.rho0(), q=q, rho1=cfg.prior.rho1)
    if cfg.sampler.likelihood == Likelihood.NONE:
        X, Y = np.zeros((0, cfg.data.d_x)), np.zeros((0, cfg.data.d_y))
    else:
        X, Y = train.X, train.Y
    ps = PosteriorSpec(prior=prior, sigma2=cfg.sampler.sigma2, model=model, X=X, Y=Y)

    targets = eval_targets(cfg, problem, test, Path(data_dir) / "test", journal)
    rows = cfg.sampler.metrics_test_rows or test.n
    Y_eval, T_eval = test.Y[:rows], targets[:rows]

    identity = run_identity(cfg, baseline, train.content_hash())
    name = run_name(cfg, baseline)
    samples = storage.SampleStore(run_dir, model.param_shapes())
    metrics = storage.metrics_table(run_dir)
    sc = cfg.sampler
    resumed_from = None

    ckpt = storage.latest_checkpoint(run_dir) if resume else None
    if ckpt is not None:
        _check_run(run_dir, identity)
        state = storage.load_checkpoint(ckpt, identity)
        resumed_from = state.iter
        metrics.truncate_after("iter", state.iter)
        samples.truncate(state.iter // sc.thin)
        journal.record(JournalEventType.RUN_RESUMED, name, identity, iteration=state.iter, checkpoint=str(ckpt))
        logger.info(f"Resuming {name} from iteration {state.iter}")
    else:
        if resume:
            logger.warning(f"No checkpoint in {run_dir}; starting a fresh chain")
        for old in storage.list_checkpoints(run_dir):
            shutil.rmtree(old)
        metrics.reset()
        samples.reset()
        _write_run_manifest(run_dir, cfg, baseline, identity, train.content_hash())
        state = init_chain(
            model,
            _chain_rng(cfg, baseline),
            step_h=sc.step_h,
            batch_size=sc.batch_size,
            flip_fraction=sc.flip_fraction,
            scheme=cfg.model.init,
            prox_params=(problem.gamma, cfg.data.lambda1, cfg.data.lambda2),
            init_active=sc.init_active,
            basis=problem.reg.B,
        )
        storage.save_checkpoint(storage.checkpoint_dir(run_dir, 0), state, identity)
        journal.record(
            JournalEventType.RUN_STARTED, name, identity,
            iters=sc.iters, q=q, gamma=problem.gamma, baseline=baseline,
        )

    def record_test_error(s: ChainState, m: ChainMetrics) -> None:
        pred, _ = model.forward(apply_mask(s.w, s.mask), Y_eval)
        m.test_err = float(np.mean(np.linalg.norm(pred - T_eval, axis=1)))

    counters = SamplerCounters()
    while state.iter < sc.iters:
        seg = min(sc.checkpoint_every - state.iter % sc.checkpoint_every, sc.iters - state.iter)
        try:
            result = run_chain(ps, state, seg, sc.thin, callbacks=[record_test_error], counters=counters)
        except DivergenceError as e:
            journal.record_error(JournalEventType.RUN_DIVERGED, name, identity, e)
            logger.error(f"Chain {name} diverged: {e.message}; last checkpoint kept")
            raise
        metrics.append(storage.metrics_row(m) for m in result.trace)
        samples.append(result.samples)
        state = result.final_state
        path = storage.save_checkpoint(storage.checkpoint_dir(run_dir, state.iter), state, identity)
        journal.record(JournalEventType.CHECKPOINT_SAVED, name, identity, iteration=state.iter, path=str(path))
        logger.debug(f"{name}: iteration {state.iter}/{sc.iters}")

    journal.record(
        JournalEventType.RUN_COMPLETED, name, identity,
        iteration=state.iter, retained=samples.count(), active_frac=state.active_fraction,
        backward_samples=counters.backward_samples,
    )
    return TrainResult(run_dir, state, counters, samples.count(), resumed_from)


# ============= make-prox-net =============

def cmd_make_prox_net(
    cfg: ExperimentConfig,
    data_dir: Path,
    run_dir: Path,
    journal: Optional[RunJournal] = None,
) -> Path:
    """
    Write a run whose only state is the exact prox network with an all-ones mask.

    Raises:
        ConfigValidationError: If the config's layer stack cannot hold the exact prox network
    """
    run_dir = Path(run_dir)
    journal = _journal(journal, run_dir)
    specs = cfg.model.specs()
    layout = match_exact_prox_layout(specs, cfg.data.d_x)
    if layout is None:
        raise ConfigValidationError(
            "model.layers must be dense(2d, bias) -> relu -> dense(d), its separable counterpart, "
            "or dense(d) -> dense(2d, bias) -> relu -> dense(d) -> dense(d)",
            {"field": "model.layers"},
        )
    if cfg.data.ortho_B and layout != "ortho":
        raise ConfigValidationError(
            "data.ortho_B needs the ortho exact-prox stack dense(d) -> dense(2d, bias) -> relu -> dense(d) -> dense(d)",
            {"field": "model.layers", "layout": layout},
        )
    train = load_split(cfg, data_dir, "train")
    problem = build_problem(cfg)
    _, w = build_exact_prox_net(
        problem.gamma, cfg.data.lambda1, cfg.data.lambda2, cfg.data.d_x, layout, problem.reg.B,
    )
    identity = run_identity(cfg, False, train.content_hash())
    for old in storage.list_checkpoints(run_dir):
        shutil.rmtree(old)
    storage.SampleStore(run_dir, w.shapes).reset()
    storage.metrics_table(run_dir).reset()
    _write_run_manifest(run_dir, cfg, False, identity, train.content_hash())
    state = ChainState(
        w=w,
        mask=Mask.ones(w.shapes),
        iter=0,
        step_h=cfg.sampler.step_h,
        batch_size=cfg.sampler.batch_size,
        flip_fraction=cfg.sampler.flip_fraction,
        rng=_chain_rng(cfg, False),
    )
    path = storage.save_checkpoint(storage.checkpoint_dir(run_dir, 0), state, identity, {"exact_prox": layout})
    journal.record(JournalEventType.CHECKPOINT_SAVED, run_name(cfg), identity, iteration=0, exact_prox=layout)
    logger.info(f"Wrote exact prox network ({layout} layout, gamma={problem.gamma:.6g}) to {path}")
    return path


# ============= eval =============

def quantiles(values: Sequence[float]) -> Dict[str, float]:
    """min, q25, median, q75, max."""
    arr = np.asarray(values, dtype=np.float64)
    return {name: float(np.quantile(arr, p)) for name, p in QUANTILES}


@dataclass
class EvalReport:
    run_dir: Path
    depth: int
    sample_indices: List[int]
    e: np.ndarray
    norm_n: np.ndarray
    summary: Dict[str, Any] = field(default_factory=dict)


def _load_eval_samples(run_dir: Path, model: Estimator, identity: str, k: int) -> Tuple[List[int], List[Tuple[Mask, FnnParams]]]:
    store = storage.SampleStore(run_dir, model.param_shapes())
    start, samples = store.read_last(k)
    if samples:
        return list(range(start, start + len(samples))), samples
    ckpt = storage.latest_checkpoint(run_dir)
    if ckpt is None:
        raise ArtifactError(f"{run_dir} holds neither retained samples nor a checkpoint", {"path": str(run_dir)})
    state = storage.load_checkpoint(ckpt, identity)
    return [0], [(state.mask, state.w)]


def cmd_eval(
    cfg: ExperimentConfig,
    data_dir: Path,
    run_dir: Path,
    journal: Optional[RunJournal] = None,
) -> EvalReport:
    """
    Per-sample test errors of the last ``eval.last_k`` retained samples.

    Writes ``eval.csv`` and ``summary.json`` into the run directory.
    """
    run_dir = Path(run_dir)
    journal = _journal(journal, run_dir)
    train = load_split(cfg, data_dir, "train")
    test = load_split(cfg, data_dir, "test")
    manifest_path = run_dir / "run.json"
    baseline = bool(storage.read_summary(manifest_path).get("baseline", False)) if manifest_path.exists() else False
    identity = run_identity(cfg, baseline, train.content_hash())
    _check_run(run_dir, identity)

    problem = build_problem(cfg)
    model = build_estimator(cfg, problem, baseline)
    targets = eval_targets(cfg, problem, test, Path(data_dir) / "test", journal)
    indices, samples = _load_eval_samples(run_dir, model, identity, cfg.eval.last_k)
    errors = posterior_test_error(model, samples, test.Y, targets)
    e = np.array([t.e for t in errors])
    norm_n = np.array([t.norm_n for t in errors])
    depth = 0 if baseline else cfg.model.depth_unroll

    table = storage.eval_table(run_dir)
    table.reset()
    table.append((idx, depth, float(ei), float(ni)) for idx, ei, ni in zip(indices, e, norm_n))

    mean_pred = posterior_mean_prediction(model, samples, test.Y)
    summary = {
        "config_hash": identity,
        "dataset_hash": test.content_hash(),
        "depth": depth,
        "baseline": baseline,
        "target": cfg.eval.target.value,
        "samples": len(samples),
        "e": quantiles(e),
        "norm_n": quantiles(norm_n),
        "zero_predictor_e": float(np.mean(np.linalg.norm(targets, axis=1))),
        "posterior_mean_e": float(np.mean(np.linalg.norm(mean_pred - targets, axis=1))),
        "posterior_mean_mse": float(np.mean((mean_pred - targets) ** 2)),
    }
    storage.write_summary(run_dir / "summary.json", summary)
    journal.record(JournalEventType.EVAL_COMPLETED, run_name(cfg, baseline), identity, median_e=summary["e"]["median"])
    return EvalReport(run_dir, depth, indices, e, norm_n, summary)


# ============= sweep-depth =============

@dataclass
class SweepReport:
    out_dir: Path
    depths: List[int]
    per_depth: Dict[int, Dict[str, float]]
    contraction: Optional[ContractionEstimate]
    recommended_depth: Optional[int]


def _sweep_entry(args: Tuple[Dict[str, Any], str, str]) -> Tuple[int, List[int], List[float]]:
    raw, data_dir, run_dir = args
    cfg = ExperimentConfig.model_validate(raw)
    journal = RunJournal(Path(run_dir) / "journal.log")
    cmd_train(cfg, Path(data_dir), Path(run_dir), journal=journal)
    report = cmd_eval(cfg, Path(data_dir), Path(run_dir), journal=journal)
    return cfg.model.depth_unroll, report.sample_indices, [float(v) for v in report.e]


def sweep_contraction(cfg: ExperimentConfig, data_dir: Path, journal: Optional[RunJournal] = None) -> ContractionEstimate:
    """Plug-in contraction rate over the training observations."""
    problem = build_problem(cfg)
    train = load_split(cfg, data_dir, "train")
    G = ensure_oracle(cfg, problem, train, Path(data_dir) / "train", journal)
    x0 = np.asarray(cfg.model.x0, dtype=np.float64) if cfg.model.x0 is not None else None
    return estimate_contraction(
        problem.fm, problem.reg, problem.gamma, train.Y, x0=x0,
        horizon=cfg.eval.contraction_horizon, tol=cfg.eval.oracle_tol, g_values=G,
    )


def cmd_sweep_depth(
    cfg: ExperimentConfig,
    data_dir: Path,
    out_dir: Path,
    depths: Optional[Sequence[int]] = None,
    workers: int = 1,
    journal: Optional[RunJournal] = None,
) -> SweepReport:
    """
    Train and evaluate one chain per unrolling depth.

    Writes ``sweep.csv`` (depth, sample_idx, e) and ``sweep.json`` with the
    per-depth quantiles, the contraction estimate and the recommended depth.
    """
    depths = list(depths if depths is not None else cfg.eval.depths)
    if not depths or any(d < 1 for d in depths):
        raise ConfigValidationError(f"depth list must be nonempty with entries >= 1, got {depths}", {"field": "depths"})
    out_dir = Path(out_dir)
    journal = _journal(journal, out_dir)

    # oracle caches are filled before fan-out so workers only read them
    problem = build_problem(cfg)
    for split in ("train", "test"):
        if cfg.eval.target == EvalTarget.ORACLE or (split == "train" and cfg.data.kind == DataKind.ELASTIC_NET):
            ensure_oracle(cfg, problem, load_split(cfg, data_dir, split), Path(data_dir) / split, journal)

    jobs = [
        (cfg.with_depth(d).model_dump(mode="json"), str(data_dir), str(out_dir / f"gdn_d{d}"))
        for d in depths
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_entry, jobs))
    else:
        results = [_sweep_entry(job) for job in jobs]

    table = storage.sweep_table(out_dir)
    table.reset()
    per_depth: Dict[int, Dict[str, float]] = {}
    for depth, indices, e in results:
        table.append((depth, idx, float(v)) for idx, v in zip(indices, e))
        per_depth[depth] = quantiles(e)

    contraction = None
    recommended = None
    if cfg.data.kind == DataKind.ELASTIC_NET:
        contraction = sweep_contraction(cfg, data_dir, journal)
        if 0.0 < contraction.rho < 1.0 and cfg.data.n_train >= 2:
            recommended = depth_rule(cfg.data.n_train, contraction.rho, cfg.eval.depth_rule_c)
    storage.write_summary(
        out_dir / "sweep.json",
        {
            "config_hash": config_hash(cfg, "run"),
            "depths": depths,
            "per_depth": {str(d): q for d, q in per_depth.items()},
            "rho": None if contraction is None else contraction.rho,
            "r0": None if contraction is None else contraction.r0,
            "recommended_depth": recommended,
            "depth_rule_c": cfg.eval.depth_rule_c,
        },
    )
    journal.record(
        JournalEventType.SWEEP_COMPLETED, cfg.name, config_hash(cfg, "run"),
        depths=depths, recommended_depth=recommended,
    )
    return SweepReport(out_dir, depths, per_depth, contraction, recommended)


def describe_error(e: GdnError) -> str:
    detail = ", ".join(f"{k}={v}" for k, v in e.details.items())
    return f"[{e.code}] {e.message}" + (f" ({detail})" if detail else "")
