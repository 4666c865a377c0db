"""Sampling-based visual MPC with vision-language guidance on a 2D tabletop."""

from .core import Action, ActionSequence, Box2D, EpisodeLog, Frame, Goal, RunConfig, load_config
from .sim import Tabletop, load_task

__all__ = ["Action", "ActionSequence", "Box2D", "EpisodeLog", "Frame", "Goal", "RunConfig", "Tabletop",
           "load_config", "load_task"]
