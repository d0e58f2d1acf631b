from sqlalchemy import create_engine, Column, Integer, String, Float, DateTime, ForeignKey, JSON, UniqueConstraint
from sqlalchemy.orm import declarative_base, relationship, sessionmaker
from datetime import datetime

Base = declarative_base()

class ExperimentRun(Base):
    """One CLI invocation: a training run, a sweep or an evaluation"""
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True)
    experiment = Column(String, nullable=False)  # e.g. 'recon', 'step_sweep'
    command = Column(String, nullable=False)  # CLI command name
    mode = Column(String)
    seed = Column(Integer, nullable=False)
    status = Column(String, nullable=False)  # 'running', 'completed', 'failed'
    config_hash = Column(String)
    config_snapshot = Column(JSON)
    created_at = Column(DateTime, default=datetime.utcnow)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)

    # Outcome
    final_loss = Column(Float)
    checkpoint_path = Column(String)
    checkpoint_sha256 = Column(String)
    error = Column(String)

    # Statistics
    metric_count = Column(Integer, default=0)
    image_count = Column(Integer, default=0)

    metrics = relationship("MetricRecord", back_populates="run", cascade="all, delete-orphan")

class MetricRecord(Base):
    """One MetricRow produced by a run"""
    __tablename__ = 'metric_records'
    __table_args__ = (UniqueConstraint('run_id', 'experiment', 'image', 'step_count', 'metric'),)

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False)
    experiment = Column(String, nullable=False)
    image = Column(Integer, nullable=False)
    step_count = Column(Integer, nullable=False)
    metric = Column(String, nullable=False)  # 'L1', 'L2', 'SSIM', ...
    value = Column(Float, nullable=False)

    run = relationship("ExperimentRun", back_populates="metrics")

# Engine and session management
DEFAULT_REGISTRY_URL = "sqlite:///./runs.db"

def make_engine(url: str = DEFAULT_REGISTRY_URL):
    """Create an engine for ``url`` and make sure the tables exist."""
    engine = create_engine(url)
    Base.metadata.create_all(engine)
    return engine

def get_session(url: str = DEFAULT_REGISTRY_URL):
    Session = sessionmaker(bind=make_engine(url))
    return Session()
