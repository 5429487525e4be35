"""
Run journal: structured JSON-lines record of what a run did.

The journal is the only artifact carrying wall-clock timestamps; metric
files stay byte-reproducible.
"""
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional
import json
import logging
import uuid


logger = logging.getLogger(__name__)


class JournalEventType(str, Enum):
    """Types of journal events."""
    DATASET_GENERATED = "dataset.generated"
    ORACLE_CACHED = "oracle.cached"
    RUN_STARTED = "run.started"
    CHECKPOINT_SAVED = "checkpoint.saved"
    RUN_RESUMED = "run.resumed"
    RUN_COMPLETED = "run.completed"
    RUN_DIVERGED = "run.diverged"
    EVAL_COMPLETED = "eval.completed"
    SWEEP_COMPLETED = "sweep.completed"


class Outcome(str, Enum):
    """Journal event outcomes."""
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass
class JournalEvent:
    """
    One journal entry.

    Attributes:
        event_type: What happened
        run: Run name (experiment name, with depth for sweeps)
        config_hash: Hash of the config the event belongs to
        outcome: Result
        context: Event-specific fields
    """
    event_type: JournalEventType
    run: str
    config_hash: str
    outcome: Outcome = Outcome.SUCCESS
    context: Dict[str, Any] = field(default_factory=dict)
    event_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["timestamp"] = self.timestamp.isoformat()
        data["event_type"] = self.event_type.value
        data["outcome"] = self.outcome.value
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)


class RunJournal:
    """Append-only journal file (``journal.log``)."""

    def __init__(self, path: Path | str, echo: bool = False):
        """
        Args:
            path: Journal file or a directory to place ``journal.log`` in
            echo: Also log each event at INFO through the module logger
        """
        path = Path(path)
        self.path = path / "journal.log" if path.is_dir() or not path.suffix else path
        self.echo = echo

    def log(self, event: JournalEvent) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(event.to_json() + "\n")
        if self.echo:
            logger.info(f"{event.event_type.value} [{event.run}] {event.context}")

    def record(
        self,
        event_type: JournalEventType,
        run: str,
        config_hash: str,
        outcome: Outcome = Outcome.SUCCESS,
        **context: Any,
    ) -> JournalEvent:
        """Build, write and return an event."""
        event = JournalEvent(event_type, run, config_hash, outcome, context)
        self.log(event)
        return event

    def record_error(self, event_type: JournalEventType, run: str, config_hash: str, error: Any) -> JournalEvent:
        """Failure event carrying the error info dict."""
        info = error.to_dict() if hasattr(error, "to_dict") else {"code": "error", "message": str(error)}
        return self.record(event_type, run, config_hash, Outcome.FAILURE, error=info)


class JournalQuery:
    """Read and filter journal entries."""

    def __init__(self, path: Path | str):
        path = Path(path)
        self.path = path / "journal.log" if path.is_dir() else path

    def query(
        self,
        event_type: Optional[JournalEventType] = None,
        run: Optional[str] = None,
        outcome: Optional[Outcome] = None,
        config_hash: Optional[str] = None,
        limit: int = 1000,
    ) -> List[Dict[str, Any]]:
        """
        Matching entries in file order.

        Args:
            event_type: Filter by event type
            run: Filter by run name
            outcome: Filter by outcome
            config_hash: Filter by config hash
            limit: Maximum results
        """
        results: List[Dict[str, Any]] = []
        try:
            with open(self.path, "r", encoding="utf-8") as f:
                for line in f:
                    try:
                        event = json.loads(line.strip())
                    except json.JSONDecodeError:
                        continue
                    if event_type and event.get("event_type") != event_type.value:
                        continue
                    if run and event.get("run") != run:
                        continue
                    if outcome and event.get("outcome") != outcome.value:
                        continue
                    if config_hash and event.get("config_hash") != config_hash:
                        continue
                    results.append(event)
                    if len(results) >= limit:
                        break
        except FileNotFoundError:
            pass
        return results

    def last(self, event_type: JournalEventType, run: Optional[str] = None) -> Optional[Dict[str, Any]]:
        found = self.query(event_type=event_type, run=run, limit=10 ** 9)
        return found[-1] if found else None
