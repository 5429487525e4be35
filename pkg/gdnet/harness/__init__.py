"""
Harness package - artifact storage, run journal and experiment commands.
"""
from .audit import JournalEventType, JournalQuery, RunJournal
from .experiments import cmd_eval, cmd_gen, cmd_make_prox_net, cmd_sweep_depth, cmd_train

__all__ = [
    "JournalEventType",
    "JournalQuery",
    "RunJournal",
    "cmd_eval",
    "cmd_gen",
    "cmd_make_prox_net",
    "cmd_sweep_depth",
    "cmd_train",
]
