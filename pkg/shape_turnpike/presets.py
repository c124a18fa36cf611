# Copyright 2025 shape-turnpike contributors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Built-in experiment cards, read from the JSON files shipped in ``configs/``.

A card ``paper_demo.json`` is the preset ``paper-demo``.
"""

from __future__ import annotations

import json
from importlib.resources import files
from typing import Any

CARD_SUFFIX = ".json"


def load_presets() -> dict[str, dict[str, Any]]:
    cards = files("shape_turnpike") / "configs"
    presets: dict[str, dict[str, Any]] = {}
    for card in sorted(cards.iterdir(), key=lambda c: c.name):
        if card.name.endswith(CARD_SUFFIX):
            name = card.name.removesuffix(CARD_SUFFIX).replace("_", "-")
            presets[name] = json.loads(card.read_text(encoding="utf-8"))
    return presets


PRESETS = load_presets()
