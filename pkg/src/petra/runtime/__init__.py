"""Stage workers, messages and the execution engines."""

from .engines import ENGINES, DeadlockError, WorkerError, run_lockstep, run_rounds, run_threads
from .log import TrainLog
from .messages import Backward, EndOfStream, Forward, decode, encode
from .reference import ReferenceTrainer
from .stage import RuntimeConfig, StageError, StageState, make_stages, stage_backward, stage_forward, tail_step

__all__ = [
    "ENGINES", "DeadlockError", "WorkerError", "run_lockstep", "run_rounds", "run_threads", "TrainLog",
    "Backward", "EndOfStream", "Forward", "decode", "encode", "ReferenceTrainer", "RuntimeConfig",
    "StageError", "StageState", "make_stages", "stage_backward", "stage_forward", "tail_step",
]
