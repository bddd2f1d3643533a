"""Simulation lab for the LFT2 two-phase pipelined BFT consensus protocol."""

from .core import GENESIS, Block, ConflictRelation, Message, MsgKind, VoteKind, VotePayload, leader_of, quorum_params
from .adversary import Behavior, FaultSpec
from .network import DelayModel, default_histogram, load_histogram, read_histogram
from .replica import OutcomeKind, Replica
from .engine import RunStats, Scenario, SimulationError, SimulationTimeout, run, sweep_timeouts

__version__ = "0.1.0"
