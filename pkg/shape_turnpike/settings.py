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
from __future__ import annotations

from functools import lru_cache

from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class RuntimeSettings(BaseSettings):
    """Process-level settings read from the environment (``TSL_*``)."""

    model_config = SettingsConfigDict(
        env_prefix="TSL_", extra="ignore", populate_by_name=True
    )

    log_level: str = Field(
        default="INFO",
        validation_alias=AliasChoices("TSL_LOG_LEVEL", "log_level"),
    )
    threads: int = Field(
        default=1,
        ge=1,
        validation_alias=AliasChoices("TSL_THREADS", "threads"),
    )


@lru_cache(maxsize=1)
def get_settings() -> RuntimeSettings:
    return RuntimeSettings()
