"""
Run Ledger (Persistence Layer).

Stores the loss and evaluation history of training runs using SQLModel over SQLite.
"""

import logging
from typing import List, Optional

from sqlmodel import Session, SQLModel, create_engine, select

from .schema import EvalRecord, LossRecord


class RunLedger:
    """
    Manages database interactions for training history.

    Attributes:
        engine (Engine): SQLAlchemy Engine instance connected to the SQLite database.
    """

    def __init__(self, db_path: str = "runs.db"):
        """
        Initialize the ledger and the database connection.

        Args:
            db_path (str): File path for the SQLite database.
        """
        self.db_path = db_path
        self.engine = create_engine(f"sqlite:///{db_path}", connect_args={"check_same_thread": False})
        try:
            SQLModel.metadata.create_all(self.engine)
        except Exception:
            logging.exception("Failed to initialize run ledger tables")
            raise

    def record_loss(self, record: LossRecord) -> LossRecord:
        with Session(self.engine) as session:
            session.add(record)
            session.commit()
            session.refresh(record)
            return record

    def record_eval(self, record: EvalRecord) -> EvalRecord:
        with Session(self.engine) as session:
            session.add(record)
            session.commit()
            session.refresh(record)
            return record

    def get_losses(self, run_id: Optional[str] = None, limit: int = 10000) -> List[LossRecord]:
        """
        Loss records in iteration order.

        Args:
            run_id (Optional[str]): Restrict to one run.
            limit (int): Maximum number of records to return.
        """
        with Session(self.engine) as session:
            statement = select(LossRecord)
            if run_id is not None:
                statement = statement.where(LossRecord.run_id == run_id)
            statement = statement.order_by(LossRecord.iteration).limit(limit)
            return list(session.exec(statement).all())

    def get_evals(self, run_id: Optional[str] = None, limit: int = 1000) -> List[EvalRecord]:
        """Evaluation records, newest first."""
        with Session(self.engine) as session:
            statement = select(EvalRecord)
            if run_id is not None:
                statement = statement.where(EvalRecord.run_id == run_id)
            statement = statement.order_by(EvalRecord.iteration.desc()).limit(limit)
            return list(session.exec(statement).all())

    def close(self) -> None:
        self.engine.dispose()
