"""JSON Schemas shipped with the package and a validating helper."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from ..errors import ParameterError

URN_PREFIX = "urn:speckleholo:"


@lru_cache(maxsize=1)
def _registry():
    schemas = {}
    for entry in resources.files("speckleholo").joinpath("schemas").iterdir():
        if entry.name.endswith(".json"):
            doc = json.loads(entry.read_text())
            schemas[entry.name[:-5]] = doc
    registry = Registry().with_resources(
        (doc["$id"], Resource.from_contents(doc)) for doc in schemas.values())
    return schemas, registry


def schema_names() -> list:
    return sorted(_registry()[0])


def get_schema(name: str) -> dict:
    schemas, _ = _registry()
    if name not in schemas:
        raise ParameterError(f"no schema named {name!r}")
    return schemas[name]


def validate(doc, name: str):
    """Raise ParameterError listing the first schema violation, if any."""
    schemas, registry = _registry()
    validator = Draft202012Validator(get_schema(name), registry=registry)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ParameterError(f"{name} document invalid at {where}: {e.message}")
