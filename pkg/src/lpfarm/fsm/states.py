"""General-purpose state implementations usable from any definition."""
from __future__ import annotations

from .engine import FsmState, state_impl

GOTO = "goto_"


@state_impl("Terminal")
class Terminal(FsmState):
    """A state that does nothing; usually the last one."""

    def enter(self, payload):
        pass

    def leave(self, payload):
        pass


@state_impl("Scripted")
class Scripted(Terminal):
    """Transition methods named ``goto_<State>`` lead to ``<State>``.

    Handy for wiring tests and skeleton definitions: the target is visible
    in the DSL text and checked by validation.
    """

    @classmethod
    def provides(cls, method):
        return method.startswith(GOTO) and len(method) > len(GOTO) or super().provides(method)

    @classmethod
    def targets(cls, method):
        if method.startswith(GOTO):
            return (method[len(GOTO):],)
        return super().targets(method)

    def __getattr__(self, attr):
        if attr.startswith(GOTO) and len(attr) > len(GOTO):
            return lambda payload: attr[len(GOTO):]
        raise AttributeError(attr)
