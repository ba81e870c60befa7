import os
import tempfile

import pytest

from src.training.ledger import RunLedger
from src.training.schema import EvalRecord, LossRecord


class TestRunLedger:
    """Unit tests for RunLedger database persistence"""

    @pytest.fixture
    def temp_db(self):
        """Create a temporary database for testing"""
        fd, path = tempfile.mkstemp(suffix=".db")
        os.close(fd)
        yield path
        # Cleanup
        if os.path.exists(path):
            os.remove(path)

    def test_initialization(self, temp_db):
        """Test that RunLedger initializes database correctly"""
        ledger = RunLedger(temp_db)
        assert os.path.exists(temp_db)
        ledger.close()

    def test_record_loss(self, temp_db):
        """Test recording a loss entry"""
        ledger = RunLedger(temp_db)
        ledger.record_loss(LossRecord(run_id="run_a", variant="full", iteration=1, loss=0.75, lr=2e-4))

        losses = ledger.get_losses()
        assert len(losses) == 1
        assert losses[0].run_id == "run_a"
        assert losses[0].variant == "full"
        assert losses[0].loss == 0.75
        ledger.close()

    def test_losses_in_iteration_order(self, temp_db):
        """Test that losses come back ordered by iteration and filtered by run"""
        ledger = RunLedger(temp_db)
        for iteration in (3, 1, 2):
            ledger.record_loss(LossRecord(run_id="run_a", iteration=iteration, loss=float(iteration), lr=1e-4))
        ledger.record_loss(LossRecord(run_id="run_b", iteration=1, loss=9.0, lr=1e-4))

        losses = ledger.get_losses(run_id="run_a")
        assert [r.iteration for r in losses] == [1, 2, 3]
        assert len(ledger.get_losses(limit=2)) == 2
        ledger.close()

    def test_evals_newest_first(self, temp_db):
        ledger = RunLedger(temp_db)
        for iteration in (10, 20):
            ledger.record_eval(EvalRecord(run_id="run_a", iteration=iteration, dice=0.5, iou=0.33, f1=0.5, hausdorff=None))

        evals = ledger.get_evals(run_id="run_a")
        assert [r.iteration for r in evals] == [20, 10]
        assert evals[0].hausdorff is None
        ledger.close()

    def test_persistence(self, temp_db):
        """Test that data persists across RunLedger instances"""
        ledger1 = RunLedger(temp_db)
        ledger1.record_loss(LossRecord(run_id="run_a", iteration=1, loss=0.5, lr=1e-4))
        ledger1.close()

        ledger2 = RunLedger(temp_db)
        losses = ledger2.get_losses()

        assert len(losses) == 1
        assert losses[0].loss == 0.5
        ledger2.close()
