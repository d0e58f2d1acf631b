from typing import Dict, Iterable, List, Optional
from sqlalchemy.orm import Session
from sqlalchemy import func
from .registry import ExperimentRun, MetricRecord
from .metrics import MetricRow

def get_or_create_run(
    session: Session,
    experiment: str,
    command: str,
    seed: int,
    config_hash: Optional[str] = None,
    mode: Optional[str] = None,
    snapshot: Optional[Dict] = None
) -> ExperimentRun:
    """Get the running record for (experiment, seed, config) or start a new one"""
    run = session.query(ExperimentRun).filter(
        ExperimentRun.experiment == experiment,
        ExperimentRun.command == command,
        ExperimentRun.seed == seed,
        ExperimentRun.config_hash == config_hash,
        ExperimentRun.status == 'running'
    ).first()

    if not run:
        run = ExperimentRun(
            experiment=experiment,
            command=command,
            mode=mode,
            seed=seed,
            config_hash=config_hash,
            config_snapshot=serialize_snapshot(snapshot or {}),
            status='running'
        )
        session.add(run)
        session.commit()

    return run

def serialize_snapshot(data: Dict) -> Dict:
    """Make a config snapshot JSON-safe."""
    serialized = {}
    for key, value in data.items():
        if isinstance(value, tuple):
            serialized[key] = list(value)
        elif value is None or isinstance(value, (bool, int, float, str, list)):
            serialized[key] = value
        else:
            serialized[key] = str(value)
    return serialized

def save_metric_batch(
    session: Session,
    run: ExperimentRun,
    rows: Iterable[MetricRow]
) -> List[MetricRecord]:
    """Save a batch of metric rows, skipping keys the run already holds"""
    saved = []

    for row in rows:
        # Check if the metric already exists for this run
        existing = session.query(MetricRecord).filter(
            MetricRecord.run_id == run.id,
            MetricRecord.experiment == row.experiment,
            MetricRecord.image == row.image,
            MetricRecord.step_count == row.step_count,
            MetricRecord.metric == row.metric
        ).first()

        if not existing:
            record = MetricRecord(
                run_id=run.id,
                experiment=row.experiment,
                image=row.image,
                step_count=row.step_count,
                metric=row.metric,
                value=row.value
            )
            session.add(record)
            saved.append(record)

    session.commit()
    return saved

def update_run_statistics(session: Session, run: ExperimentRun):
    """Update metric and image counts for a run"""
    stats = {
        'metric_count': session.query(MetricRecord).filter(
            MetricRecord.run_id == run.id
        ).count(),
        'image_count': session.query(MetricRecord).filter(
            MetricRecord.run_id == run.id
        ).with_entities(func.count(func.distinct(MetricRecord.image))).scalar() or 0
    }

    for key, value in stats.items():
        setattr(run, key, value)

    session.commit()

def finish_run(
    session: Session,
    run: ExperimentRun,
    status: str = 'completed',
    final_loss: Optional[float] = None,
    checkpoint_path: Optional[str] = None,
    checkpoint_sha256: Optional[str] = None,
    error: Optional[str] = None
) -> ExperimentRun:
    """Close a run with its outcome"""
    run.status = status
    run.final_loss = final_loss
    run.checkpoint_path = checkpoint_path
    run.checkpoint_sha256 = checkpoint_sha256
    run.error = error
    update_run_statistics(session, run)
    return run

def get_run_summary(
    session: Session,
    experiment: Optional[str] = None,
    lookback: int = 10
) -> Dict:
    """Summarize recent runs, optionally for one experiment"""
    query = session.query(ExperimentRun)
    if experiment:
        query = query.filter(ExperimentRun.experiment == experiment)

    runs = query.order_by(ExperimentRun.id.desc()).limit(lookback).all()

    summary = []
    for run in runs:
        means = session.query(MetricRecord.metric, func.avg(MetricRecord.value)).filter(
            MetricRecord.run_id == run.id
        ).group_by(MetricRecord.metric).all()

        run_summary = {
            'id': run.id,
            'experiment': run.experiment,
            'command': run.command,
            'mode': run.mode,
            'seed': run.seed,
            'status': run.status,
            'final_loss': run.final_loss,
            'metric_count': run.metric_count,
            'image_count': run.image_count,
            'metric_means': {metric: mean for metric, mean in means},
            'created_at': run.created_at.strftime('%Y-%m-%d %H:%M:%S') if run.created_at else None
        }
        summary.append(run_summary)

    return {
        'runs': summary,
        'total_running': session.query(ExperimentRun).filter(
            ExperimentRun.status == 'running'
        ).count(),
        'total_failed': session.query(ExperimentRun).filter(
            ExperimentRun.status == 'failed'
        ).count()
    }
