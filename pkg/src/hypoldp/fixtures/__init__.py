"""Shipped example systems."""

from importlib import resources

from ..vectorfields import VectorFieldSystem, load_system

NAMES = ("elliptic", "heisenberg", "grushin", "engel", "counterexample")


def fixture_path(name: str):
    if name not in NAMES:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(NAMES)}")
    return resources.files(__package__) / f"{name}.json"


def load_fixture(name: str) -> VectorFieldSystem:
    with resources.as_file(fixture_path(name)) as p:
        return load_system(p)
