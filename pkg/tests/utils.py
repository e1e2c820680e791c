# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

from __future__ import annotations

from typing import Any


class FakeEventLogger:
    def __init__(self) -> None:
        self.events: list[tuple[str, dict[str, Any]]] = []

    def emit(self, schema_id: str, data: dict) -> None:
        self.events.append((schema_id, data))

    @property
    def actions(self) -> list[str | None]:
        return [data.get("action") for _, data in self.events]
