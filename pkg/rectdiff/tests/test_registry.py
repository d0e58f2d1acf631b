import pytest

from ..registry import ExperimentRun, MetricRecord, get_session


def test_experiment_run_creation(session):
    """Test creating an experiment run."""
    run = ExperimentRun(
        experiment='recon',
        command='train-recon',
        seed=0,
        status='running',
        config_snapshot={'T': 100, 'widths': [16, 32]}
    )
    session.add(run)
    session.commit()

    # Verify the run was created
    saved_run = session.query(ExperimentRun).first()
    assert saved_run.experiment == 'recon'
    assert saved_run.status == 'running'
    assert saved_run.config_snapshot['widths'] == [16, 32]
    assert saved_run.created_at is not None

def test_metric_relationships(session):
    """Test relationships between metric records and their run."""
    run = ExperimentRun(experiment='eval', command='eval', seed=0, status='running')
    session.add(run)
    session.commit()

    session.add(MetricRecord(run_id=run.id, experiment='recon_frozen', image=0, step_count=25,
                             metric='L2', value=0.04))
    session.add(MetricRecord(run_id=run.id, experiment='recon_rectified', image=0, step_count=25,
                             metric='L2', value=0.03))
    session.commit()

    # Verify relationships
    assert len(run.metrics) == 2
    assert {m.experiment for m in run.metrics} == {'recon_frozen', 'recon_rectified'}
    assert run.metrics[0].run.command == 'eval'

def test_metric_key_is_unique(session):
    """Test a run cannot hold two rows with the same key."""
    run = ExperimentRun(experiment='eval', command='eval', seed=0, status='running')
    session.add(run)
    session.commit()

    for value in (0.1, 0.2):
        session.add(MetricRecord(run_id=run.id, experiment='a', image=1, step_count=5, metric='L1', value=value))
    with pytest.raises(Exception):
        session.commit()
    session.rollback()

def test_metrics_deleted_with_run(session):
    """Test metric records are removed with their run."""
    run = ExperimentRun(experiment='eval', command='eval', seed=0, status='completed')
    run.metrics.append(MetricRecord(experiment='a', image=0, step_count=5, metric='L1', value=0.1))
    session.add(run)
    session.commit()

    session.delete(run)
    session.commit()
    assert session.query(MetricRecord).count() == 0

def test_get_session_creates_tables(tmp_path):
    """Test a file-backed registry is created on first use."""
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    session = get_session(url)
    assert session.query(ExperimentRun).count() == 0
    session.close()
    assert (tmp_path / 'runs.db').exists()
