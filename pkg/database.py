"""
Results archive for driftclass experiments.
Stores finished repetitions with SQLAlchemy so interrupted sweeps can resume.
"""

import logging
import os
from datetime import datetime, timedelta, timezone
from typing import Any, Dict, List, Optional

from sqlalchemy import JSON, Column, DateTime, Integer, String, Text, UniqueConstraint, create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import declarative_base, sessionmaker

from config import DATABASE_CONFIG
from utils import make_json_serializable

logger = logging.getLogger(__name__)

Base = declarative_base()


def _now():
    return datetime.now(timezone.utc).replace(tzinfo=None)


class ExperimentRun(Base):
    """One configuration (identified by its hash) that has been run."""
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    config_hash = Column(String(64), unique=True, nullable=False)
    config = Column(JSON, nullable=False)
    created_at = Column(DateTime, default=_now)
    updated_at = Column(DateTime, default=_now, onupdate=_now)


class RepetitionRecord(Base):
    """Outcome of one repetition of a run."""
    __tablename__ = 'repetition_records'
    __table_args__ = (UniqueConstraint('config_hash', 'rep_index', name='uq_run_repetition'),)

    id = Column(Integer, primary_key=True, autoincrement=True)
    config_hash = Column(String(64), nullable=False, index=True)
    rep_index = Column(Integer, nullable=False)
    status = Column(String(16), nullable=False)
    payload = Column(JSON, nullable=False)
    error = Column(Text)
    created_at = Column(DateTime, default=_now)


class ResultsDatabase:
    """Archive of experiment runs and their repetition records."""

    def __init__(self, database_url: Optional[str] = None):
        """
        Initialize database connection.

        Args:
            database_url: SQLAlchemy URL, e.g. sqlite:///results/archive.db
        """
        if not database_url:
            database_url = DATABASE_CONFIG["url"] or os.getenv("DATABASE_URL")

        if not database_url:
            raise ValueError("Database URL is required. Set DATABASE_URL environment variable.")

        try:
            self.engine = create_engine(database_url, echo=False, pool_recycle=DATABASE_CONFIG["pool_recycle"])
            self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)

            # Create tables if they don't exist
            Base.metadata.create_all(bind=self.engine)
            logger.info("Results database ready")

        except Exception as e:
            logger.error(f"Failed to connect to database: {str(e)}")
            raise

    def save_run(self, config_hash: str, config: Dict[str, Any]) -> bool:
        """
        Register a configuration; existing runs are left untouched.

        Returns:
            True if the run is present afterwards, False on database errors
        """
        with self.SessionLocal() as session:
            try:
                if session.query(ExperimentRun).filter_by(config_hash=config_hash).first() is None:
                    session.add(ExperimentRun(config_hash=config_hash, config=make_json_serializable(config)))
                    session.commit()
                return True
            except SQLAlchemyError as e:
                logger.error(f"Database error saving run {config_hash}: {str(e)}")
                session.rollback()
                return False

    def save_repetition(self, config_hash: str, record: Dict[str, Any]) -> bool:
        """
        Store (or replace) the record of one repetition.

        Args:
            config_hash: Hash of the run configuration
            record: Repetition record as produced by harness.run_repetition

        Returns:
            True if saved successfully, False otherwise
        """
        with self.SessionLocal() as session:
            try:
                rep_index = int(record["rep_index"])
                session.query(RepetitionRecord)\
                    .filter_by(config_hash=config_hash, rep_index=rep_index)\
                    .delete()
                session.add(RepetitionRecord(
                    config_hash=config_hash,
                    rep_index=rep_index,
                    status=record.get("status", "ok"),
                    payload=make_json_serializable(record),
                    error=record.get("error"),
                ))
                session.commit()
                return True
            except SQLAlchemyError as e:
                logger.error(f"Database error saving repetition: {str(e)}")
                session.rollback()
                return False

    def get_repetitions(self, config_hash: str, status: Optional[str] = "ok") -> Dict[int, Dict[str, Any]]:
        """
        Archived records of a run, keyed by repetition index.

        Args:
            config_hash: Run to look up
            status: Only return records with this status (None for all)
        """
        try:
            with self.SessionLocal() as session:
                query = session.query(RepetitionRecord).filter_by(config_hash=config_hash)
                if status is not None:
                    query = query.filter_by(status=status)
                return {row.rep_index: row.payload for row in query.order_by(RepetitionRecord.rep_index).all()}
        except SQLAlchemyError as e:
            logger.error(f"Error retrieving repetitions for {config_hash}: {str(e)}")
            return {}

    def get_recent_runs(self, limit: int = 10, days: int = 30) -> List[Dict[str, Any]]:
        """
        Get recently registered runs.

        Args:
            limit: Maximum number of results
            days: Number of days to look back
        """
        try:
            with self.SessionLocal() as session:
                cutoff_date = _now() - timedelta(days=days)
                runs = session.query(ExperimentRun)\
                    .filter(ExperimentRun.created_at >= cutoff_date)\
                    .order_by(ExperimentRun.created_at.desc())\
                    .limit(limit)\
                    .all()
                return [{
                    'config_hash': run.config_hash,
                    'config': run.config,
                    'repetitions': session.query(RepetitionRecord).filter_by(config_hash=run.config_hash).count(),
                    'created_at': run.created_at.isoformat(),
                } for run in runs]
        except SQLAlchemyError as e:
            logger.error(f"Error retrieving recent runs: {str(e)}")
            return []

    def cleanup_old_runs(self, days_to_keep: int = 90) -> int:
        """
        Delete runs (and their repetitions) older than days_to_keep.

        Returns:
            Number of runs deleted
        """
        with self.SessionLocal() as session:
            try:
                cutoff_date = _now() - timedelta(days=days_to_keep)
                hashes = [run.config_hash for run in
                          session.query(ExperimentRun).filter(ExperimentRun.created_at < cutoff_date).all()]
                if hashes:
                    session.query(RepetitionRecord)\
                        .filter(RepetitionRecord.config_hash.in_(hashes))\
                        .delete(synchronize_session=False)
                    session.query(ExperimentRun)\
                        .filter(ExperimentRun.config_hash.in_(hashes))\
                        .delete(synchronize_session=False)
                session.commit()
                logger.info(f"Cleanup completed: {len(hashes)} runs deleted")
                return len(hashes)
            except SQLAlchemyError as e:
                logger.error(f"Error during database cleanup: {str(e)}")
                session.rollback()
                return 0
