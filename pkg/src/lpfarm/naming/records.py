"""Service records and the replica merge rule."""
from __future__ import annotations

from dataclasses import asdict, dataclass


class NamingError(Exception):
    pass


class NotFound(NamingError):
    pass


class AllReplicasDown(NamingError):
    pass


@dataclass(frozen=True)
class ServiceRecord:
    name: str
    domain: str
    location: tuple[str, int] | None
    registered_at: float
    generation: int
    deleted: bool = False

    @property
    def key(self) -> tuple[str, str]:
        return (self.domain, self.name)

    @property
    def live(self) -> bool:
        return not self.deleted

    def rank(self):
        """Ordering used to pick the winner between two versions of a record."""
        loc = "" if self.location is None else f"{self.location[0]}:{self.location[1]}"
        return (self.generation, self.registered_at, self.deleted, loc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["location"] = list(self.location) if self.location else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ServiceRecord:
        loc = d.get("location")
        return cls(
            name=d["name"],
            domain=d["domain"],
            location=(loc[0], int(loc[1])) if loc else None,
            registered_at=float(d["registered_at"]),
            generation=int(d["generation"]),
            deleted=bool(d.get("deleted", False)),
        )


def newer(a: ServiceRecord | None, b: ServiceRecord) -> bool:
    """True if ``b`` should replace ``a``.

    Highest generation wins; ties go to the later registration, then to a
    tombstone, then to the lexicographically larger location.
    """
    return a is None or b.rank() > a.rank()
