"""
Experiment harness: dataset generation, training orchestration, evaluation,
the step sweep, the λ sweep and the reconstruction-loss ablation.

Every function takes a validated ExperimentConfig, reads and writes files under
``cfg.out_dir`` and returns a RunOutcome the CLI records in the registry.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import metrics as M
from .config import ExperimentConfig
from .denoiser import DenoiserParams, frozen_eps_fn, load_denoiser, save_denoiser
from .diffusion import NoiseSchedule, ddim_sample, uniform_step_indices
from .errors import MissingCheckpointError, RectDiffError
from .pgm import dump_images
from .probe import get_direction
from .rectifier import RectifierParams, load_rectifier, save_rectifier
from .toyset import ToyDataset, export_pgm, load_dataset, make_dataset, save_dataset, split_seed
from .training import TrainResult, batched, conditional_eps, edit_sample, invert, reconstruct, train

logger = logging.getLogger(__name__)

PGM_LIMIT = 8
_SALTS = {"gap": 11, "noise": 12, "ddpm": 13, "sample": 14}


@dataclass
class RunOutcome:
    experiment: str
    rows: List[M.MetricRow] = field(default_factory=list)
    final_loss: Optional[float] = None
    checkpoint_path: Optional[str] = None
    checkpoint_sha256: Optional[str] = None
    outputs: Dict[str, str] = field(default_factory=dict)


def _rng(cfg: ExperimentConfig, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _SALTS[purpose]]))


def _load(loader, path: str, what: str):
    if not os.path.exists(path):
        raise MissingCheckpointError(f"{what} {path} does not exist; run the producing command first")
    return loader(path)


def _denoiser(cfg: ExperimentConfig) -> DenoiserParams:
    return _load(load_denoiser, cfg.denoiser_path, "denoiser checkpoint")


def _rectifier(path: str, what: str = "rectifier checkpoint") -> RectifierParams:
    return _load(load_rectifier, path, what)


def _dataset(path: str, what: str) -> ToyDataset:
    return _load(load_dataset, path, what)


def _heldout(cfg: ExperimentConfig, n: Optional[int] = None) -> ToyDataset:
    return _dataset(cfg.heldout_path, "held-out dataset").subset(n or cfg.n_heldout)


def _csv_pair(cfg: ExperimentConfig, name: str, rows: List[M.MetricRow],
              summary: Optional[pd.DataFrame] = None) -> Dict[str, str]:
    df = M.metric_frame(rows)
    paths = {"csv": M.write_csv(df, os.path.join(cfg.out_dir, f"{name}.csv"))}
    summary = M.summarize(df) if summary is None else summary
    paths["summary"] = M.write_csv(summary, os.path.join(cfg.out_dir, f"{name}_summary.csv"))
    return paths


def _wanted(cfg: ExperimentConfig, metric: str) -> bool:
    return metric in cfg.metrics


# ---------------------------------------------------------------------------
# data and training
# ---------------------------------------------------------------------------

def generate_data(cfg: ExperimentConfig) -> RunOutcome:
    """Write the train, edit and held-out splits plus a few graymap previews."""
    outcome = RunOutcome("gen_data")
    for split, n, path in (("train", cfg.n_train, cfg.data_path), ("edit", cfg.n_edit, cfg.edit_data_path),
                           ("heldout", cfg.n_heldout, cfg.heldout_path)):
        ds = make_dataset(split_seed(cfg.seed, split), n, cfg.image_size)
        save_dataset(path, ds)
        export_pgm(ds, os.path.join(cfg.out_dir, "pgm", "data"), prefix=split, limit=PGM_LIMIT)
        outcome.outputs[split] = path
    return outcome


def _train_outcome(name: str, result: TrainResult, path: str, digest: str) -> RunOutcome:
    return RunOutcome(name, final_loss=result.final_loss, checkpoint_path=path, checkpoint_sha256=digest)


def run_pretrain(cfg: ExperimentConfig) -> RunOutcome:
    ds = _dataset(cfg.data_path, "training dataset")
    result = train(cfg.train_config("pretrain"), ds, cfg.schedule(), denoiser_config=cfg.denoiser_config())
    digest = save_denoiser(cfg.denoiser_path, result.params)
    return _train_outcome("pretrain", result, cfg.denoiser_path, digest)


def run_train_recon(cfg: ExperimentConfig, mode: Optional[str] = None, path: Optional[str] = None) -> RunOutcome:
    mode = mode or cfg.recon_mode()
    path = path or cfg.rectifier_path
    params = _denoiser(cfg)
    ds = _dataset(cfg.data_path, "training dataset")
    result = train(cfg.train_config(mode), ds, cfg.schedule(), params=params, rectifier_config=cfg.rectifier_config())
    digest = save_rectifier(path, result.params)
    return _train_outcome(mode, result, path, digest)


def run_train_edit(cfg: ExperimentConfig, strategy: str = "sm", path: Optional[str] = None,
                   **overrides) -> RunOutcome:
    """Train an editing rectifier from the reconstruction-trained one."""
    params = _denoiser(cfg)
    R_recon = _rectifier(cfg.rectifier_path, "reconstruction rectifier")
    ds = _dataset(cfg.edit_data_path, "editing dataset")
    s = cfg.schedule()
    tc = cfg.train_config("edit_sm" if strategy == "sm" else "edit_markov", **overrides)
    result = train(tc, ds, s, params=params, R=R_recon)
    path = path or (cfg.edit_path if strategy == "sm" else cfg.markov_path)
    digest = save_rectifier(path, result.params)
    return _train_outcome(tc.mode, result, path, digest)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def run_sample(cfg: ExperimentConfig, rectifier_path: Optional[str] = None, unconditional: bool = False,
               count: int = PGM_LIMIT) -> RunOutcome:
    """Write graymaps of reconstructions/edits of held-out images, or of
    unconditional samples from the frozen denoiser."""
    params = _denoiser(cfg)
    s = cfg.schedule()
    steps = uniform_step_indices(s.T, cfg.eval_steps)
    directory = os.path.join(cfg.out_dir, "pgm", "sample")
    if unconditional:
        x_T = _rng(cfg, "sample").standard_normal((count, cfg.channels, cfg.image_size, cfg.image_size))
        images = ddim_sample(x_T, frozen_eps_fn(params), steps, s).final
        name = "unconditional"
    else:
        R = _rectifier(rectifier_path) if rectifier_path else None
        x0 = _heldout(cfg).images[:count]
        images, _ = edit_sample(params, R, x0, steps, s, sampler=cfg.sampler, rng=_rng(cfg, "ddpm"))
        name = "rectified" if R is not None else "frozen"
    paths = dump_images(directory, name, images)
    return RunOutcome("sample", outputs={"pgm_dir": directory, "count": str(len(paths))})


def run_invert(cfg: ExperimentConfig, rectifier_path: Optional[str] = None) -> RunOutcome:
    """Invert the held-out set and store the latents as a dataset container."""
    params = _denoiser(cfg)
    s = cfg.schedule()
    R = _rectifier(rectifier_path) if rectifier_path else None
    ds = _heldout(cfg)
    steps = uniform_step_indices(s.T, cfg.eval_steps)
    latents = batched(lambda x: invert(params, x, steps, s, R).final, ds.images, cfg.batch_size)
    path = os.path.join(cfg.out_dir, "latents.bin")
    digest = save_dataset(path, ToyDataset(latents, ds.attributes))
    rows = M.rows_for("invert", cfg.eval_steps, "latent_std", latents.reshape(len(latents), -1).std(axis=1))
    return RunOutcome("invert", rows=rows, checkpoint_path=path, checkpoint_sha256=digest)


# ---------------------------------------------------------------------------
# evaluation and sweeps
# ---------------------------------------------------------------------------

def _recon_rows(cfg: ExperimentConfig, params: DenoiserParams, R: Optional[RectifierParams], x0: np.ndarray,
                n_steps: int, s: NoiseSchedule, experiment: str) -> Tuple[List[M.MetricRow], np.ndarray]:
    steps = uniform_step_indices(s.T, n_steps)
    recon = batched(lambda x: reconstruct(params, R, x, steps, s), x0, cfg.batch_size)
    rows = []
    for name, metric in M.PIXEL_METRICS.items():
        if _wanted(cfg, name):
            rows += M.rows_for(experiment, n_steps, name, M.per_image(metric, recon, x0))
    return rows, recon


def _model_rows(cfg: ExperimentConfig, params: DenoiserParams, R: Optional[RectifierParams], x0: np.ndarray,
                s: NoiseSchedule, experiment: str) -> List[M.MetricRow]:
    """Posterior gap and noise-fitting loss; identical draws for every model."""
    model = conditional_eps(params, R, s)
    rows = []
    if _wanted(cfg, "posterior_gap"):
        gap = M.posterior_gap_per_image(model, x0, s, cfg.gap_t_samples, _rng(cfg, "gap"), cfg.batch_size)
        rows += M.rows_for(experiment, 0, "posterior_gap", gap)
    if _wanted(cfg, "noise_loss"):
        loss = M.noise_loss_per_image(model, x0, s, cfg.gap_t_samples, _rng(cfg, "noise"), cfg.batch_size)
        rows += M.rows_for(experiment, 0, "noise_loss", loss)
    return rows


def _edit_rows(cfg: ExperimentConfig, params: DenoiserParams, R: RectifierParams, x0: np.ndarray, n_steps: int,
               s: NoiseSchedule, experiment: str) -> Tuple[List[M.MetricRow], np.ndarray]:
    """Edit rows are labelled with the steps actually taken; ddpm always runs all T."""
    direction = get_direction(cfg.attribute)
    if cfg.sampler == "ddpm":
        n_steps = s.T
    steps = uniform_step_indices(s.T, n_steps)
    rng = _rng(cfg, "ddpm")
    edited = batched(lambda x: edit_sample(params, R, x, steps, s, sampler=cfg.sampler, rng=rng)[0],
                     x0, cfg.batch_size)
    rows = M.rows_for(experiment, n_steps, "L1", M.per_image(M.metric_l1, edited, x0)) \
        if _wanted(cfg, "L1") else []
    if _wanted(cfg, "probe_shift"):
        rows += M.rows_for(experiment, n_steps, "probe_shift", M.probe_shift_per_image(x0, edited, direction))
    if _wanted(cfg, "shift_cosine"):
        rows += M.rows_for(experiment, n_steps, "shift_cosine", M.shift_cosine_per_image(x0, edited, direction))
    if _wanted(cfg, "off_attr_drift"):
        rows += M.rows_for(experiment, n_steps, "off_attr_drift", M.off_attr_drift_per_image(x0, edited, direction))
    return rows, edited


def paired_summary(df: pd.DataFrame, baseline: str, candidate: str) -> pd.DataFrame:
    """Per (step_count, metric): means of both experiments and paired statistics.

    Lower is better except for SSIM, probe_shift and shift_cosine, which are compared reversed.
    """
    records = []
    for (step_count, metric), group in df.groupby(["step_count", "metric"], sort=True):
        a = group[group["experiment"] == candidate].sort_values("image")["value"].to_numpy()
        b = group[group["experiment"] == baseline].sort_values("image")["value"].to_numpy()
        if len(a) == 0 or len(a) != len(b):
            continue
        higher_better = metric in ("SSIM", "probe_shift", "shift_cosine")
        stat = M.paired_comparison(b, a) if higher_better else M.paired_comparison(a, b)
        records.append({"baseline": baseline, "candidate": candidate, "step_count": step_count, "metric": metric,
                        "baseline_mean": float(b.mean()), "candidate_mean": float(a.mean()), **stat})
    return pd.DataFrame(records)


def run_eval(cfg: ExperimentConfig) -> RunOutcome:
    """Frozen vs. rectified reconstruction on the held-out set, plus edits when
    an editing checkpoint exists."""
    params = _denoiser(cfg)
    R = _rectifier(cfg.rectifier_path, "reconstruction rectifier")
    s = cfg.schedule()
    x0 = _heldout(cfg).images
    rows: List[M.MetricRow] = []
    for experiment, model in (("recon_frozen", None), ("recon_rectified", R)):
        recon_rows, _ = _recon_rows(cfg, params, model, x0, cfg.eval_steps, s, experiment)
        rows += recon_rows + _model_rows(cfg, params, model, x0, s, experiment)
    if os.path.exists(cfg.edit_path):
        rows += _edit_rows(cfg, params, _rectifier(cfg.edit_path), x0, cfg.eval_steps, s, "edit_sm")[0]
    df = M.metric_frame(rows)
    summary = paired_summary(df, "recon_frozen", "recon_rectified")
    for rec in summary.to_dict("records"):
        logger.info("eval %s@%s: frozen %.5g rectified %.5g (t-test p=%.3g, sign p=%.3g)", rec["metric"],
                    rec["step_count"], rec["baseline_mean"], rec["candidate_mean"], rec["ttest_p"], rec["sign_p"])
    return RunOutcome("eval", rows=rows, outputs=_csv_pair(cfg, "eval", rows, summary))


def run_step_sweep(cfg: ExperimentConfig) -> RunOutcome:
    """Reconstruction (frozen vs. rectified) and editing (score matching vs.
    Markov) over ``cfg.step_counts``."""
    params = _denoiser(cfg)
    R = _rectifier(cfg.rectifier_path, "reconstruction rectifier")
    R_sm = _rectifier(cfg.edit_path, "score-matching editing rectifier")
    R_markov = _rectifier(cfg.markov_path, "Markov editing rectifier")
    s = cfg.schedule()
    x0 = _heldout(cfg).images
    rows: List[M.MetricRow] = []
    for n in tqdm(cfg.step_counts, desc="step sweep", disable=not cfg.progress):
        for experiment, model in (("recon_frozen", None), ("recon_rectified", R)):
            recon_rows, images = _recon_rows(cfg, params, model, x0, n, s, experiment)
            rows += recon_rows
            dump_images(os.path.join(cfg.out_dir, "pgm", experiment, f"steps_{n:03d}"), "img", images[:PGM_LIMIT])
    edit_counts = cfg.step_counts
    if cfg.sampler == "ddpm":
        logger.info("ddpm editing always runs all %d steps; editing is evaluated once", s.T)
        edit_counts = (s.T,)
    for n in edit_counts:
        for experiment, model in (("edit_sm", R_sm), ("edit_markov", R_markov)):
            edit_rows, images = _edit_rows(cfg, params, model, x0, n, s, experiment)
            rows += edit_rows
            dump_images(os.path.join(cfg.out_dir, "pgm", experiment, f"steps_{n:03d}"), "img", images[:PGM_LIMIT])
    df = M.metric_frame(rows)
    outputs = _csv_pair(cfg, "step_sweep", rows)
    trends = step_trends(df)
    outputs["trends"] = M.write_csv(trends, os.path.join(cfg.out_dir, "step_sweep_trends.csv"), note=None)
    return RunOutcome("step_sweep", rows=rows, outputs=outputs)


def step_trends(df: pd.DataFrame) -> pd.DataFrame:
    """Slope of each experiment's mean metric against step count, for
    experiments measured at two or more step counts."""
    means = df.groupby(["experiment", "metric", "step_count"], sort=True)["value"].mean().reset_index()
    records = []
    for (experiment, metric), group in means.groupby(["experiment", "metric"], sort=True):
        if len(group) < 2:
            continue
        records.append({"experiment": experiment, "metric": metric,
                        "slope": M.trend_slope(group["step_count"], group["value"])})
    return pd.DataFrame(records, columns=["experiment", "metric", "slope"])


def lambda_experiment(lambda_clip: float, lambda_recon: float) -> str:
    return f"lambda_c{lambda_clip:g}_r{lambda_recon:g}"


def run_lambda_sweep(cfg: ExperimentConfig) -> RunOutcome:
    """Train one score-matching editor per (λ_clip, λ_recon) cell and measure
    its probe shift and pixel drift."""
    params = _denoiser(cfg)
    R_recon = _rectifier(cfg.rectifier_path, "reconstruction rectifier")
    ds = _dataset(cfg.edit_data_path, "editing dataset")
    s = cfg.schedule()
    x0 = _heldout(cfg, cfg.n_edit).images
    rows: List[M.MetricRow] = []
    cells = [(c, r) for c in cfg.lambda_grid for r in cfg.lambda_grid]
    for lambda_clip, lambda_recon in tqdm(cells, desc="lambda sweep", disable=not cfg.progress):
        experiment = lambda_experiment(lambda_clip, lambda_recon)
        tc = cfg.train_config("edit_sm", lambda_clip=lambda_clip, lambda_recon=lambda_recon,
                              log_path=os.path.join(cfg.out_dir, "lambda", f"train_{experiment}.csv"))
        R_edit = train(tc, ds, s, params=params, R=R_recon).params
        rows += _edit_rows(cfg, params, R_edit, x0, cfg.eval_steps, s, experiment)[0]
    return RunOutcome("lambda_sweep", rows=rows, outputs=_csv_pair(cfg, "lambda_sweep", rows))


def lambda_grid_table(df: pd.DataFrame, metric: str, grid: Sequence[float]) -> np.ndarray:
    """Mean ``metric`` as a matrix indexed [λ_clip, λ_recon]."""
    table = np.full((len(grid), len(grid)), np.nan)
    for i, c in enumerate(grid):
        for j, r in enumerate(grid):
            sel = df[(df["experiment"] == lambda_experiment(c, r)) & (df["metric"] == metric)]
            if len(sel):
                table[i, j] = sel["value"].mean()
    return table


ABLATION_VARIANTS = (("e", "recon"), ("l1", "recon_l1"), ("l1_dw", "recon_l1_dw"))


def run_loss_ablation(cfg: ExperimentConfig) -> RunOutcome:
    """Train a rectifier per reconstruction loss and evaluate each on the held-out set."""
    params = _denoiser(cfg)
    ds = _dataset(cfg.data_path, "training dataset")
    s = cfg.schedule()
    x0 = _heldout(cfg).images
    rows: List[M.MetricRow] = []
    for name, mode in ABLATION_VARIANTS:
        tc = cfg.train_config(mode, log_path=os.path.join(cfg.out_dir, "ablation", f"train_{name}.csv"))
        result = train(tc, ds, s, params=params, rectifier_config=cfg.rectifier_config())
        save_rectifier(os.path.join(cfg.out_dir, "ablation", f"rectifier_{name}.ckpt"), result.params)
        experiment = f"loss_{name}"
        recon_rows, images = _recon_rows(cfg, params, result.params, x0, cfg.eval_steps, s, experiment)
        rows += recon_rows + _model_rows(cfg, params, result.params, x0, s, experiment)
        dump_images(os.path.join(cfg.out_dir, "pgm", experiment), "img", images[:PGM_LIMIT])
    df = M.metric_frame(rows)
    gap = df[df["metric"] == "posterior_gap"].groupby("experiment")["value"].mean()
    if len(gap) == 3 and gap["loss_e"] > min(gap["loss_l1"], gap["loss_l1_dw"]):
        logger.warning("e-loss posterior gap %.4e is not the lowest (l1 %.4e, l1_dw %.4e)",
                       gap["loss_e"], gap["loss_l1"], gap["loss_l1_dw"])
    return RunOutcome("loss_ablation", rows=rows, outputs=_csv_pair(cfg, "loss_ablation", rows))


CHECKPOINTS = (("data_path", load_dataset), ("edit_data_path", load_dataset), ("heldout_path", load_dataset),
               ("denoiser_path", load_denoiser), ("rectifier_path", load_rectifier), ("edit_path", load_rectifier),
               ("markov_path", load_rectifier))


def checkpoint_status(cfg: ExperimentConfig) -> List[Tuple[str, str, str]]:
    """(key, path, status) for every file a config names; status is ``ok``,
    ``missing`` or ``unreadable: <reason>``."""
    statuses = []
    for key, loader in CHECKPOINTS:
        path = getattr(cfg, key)
        if not os.path.exists(path):
            statuses.append((key, path, "missing"))
            continue
        try:
            loader(path)
        except RectDiffError as e:
            statuses.append((key, path, f"unreadable: {e}"))
        else:
            statuses.append((key, path, "ok"))
    return statuses
