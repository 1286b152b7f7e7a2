import json
from pathlib import Path
from typing import Any, Iterable, List, Union

import aiofiles
import pandas as pd
from loguru import logger
from pydantic import BaseModel

from app.core.config import get_settings
from app.schemas.results import RunManifest

settings = get_settings()

CSV_FLOAT_FORMAT = "%.17g"


def frame_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def dumps_json(data: Any) -> str:
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


class ArtifactWriter:
    """Writes run outputs under one root and remembers their relative paths."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: List[str] = []

    def path_for(self, relative: str) -> Path:
        path = self.root / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        if relative not in self.artifacts:
            self.artifacts.append(relative)
        return path

    def write_text(self, relative: str, text: str) -> Path:
        path = self.path_for(relative)
        path.write_text(text, encoding="utf-8")
        return path

    def write_json(self, relative: str, data: Any) -> Path:
        return self.write_text(relative, dumps_json(data))

    def write_csv(self, relative: str, frame: pd.DataFrame) -> Path:
        return self.write_text(relative, frame_to_csv(frame))

    def append_jsonl(self, relative: str, record: BaseModel) -> Path:
        path = self.path_for(relative)
        with path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record.model_dump(mode="json")) + "\n")
        return path

    def start_jsonl(self, relative: str) -> Path:
        return self.write_text(relative, "")

    async def write_text_async(self, relative: str, text: str) -> Path:
        path = self.path_for(relative)
        try:
            async with aiofiles.open(path, "w", encoding="utf-8") as f:
                await f.write(text)
        except Exception as e:
            logger.error(f"Error writing artifact {path}: {str(e)}")
            raise
        return path

    async def write_csv_async(self, relative: str, frame: pd.DataFrame) -> Path:
        return await self.write_text_async(relative, frame_to_csv(frame))

    def write_manifest(
        self,
        command: str,
        config_hash: str,
        seeds: Iterable[int],
        summaries: dict,
    ) -> RunManifest:
        manifest = RunManifest(
            command=command,
            config_hash=config_hash,
            seeds=list(seeds),
            artifacts=sorted(self.artifacts),
            summaries=summaries,
            tool_version=settings.tool_version,
        )
        missing = manifest.missing_artifacts(self.root)
        if missing:
            raise FileNotFoundError(f"manifest references missing artifacts: {missing}")
        (self.root / "manifest.json").write_text(dumps_json(manifest), encoding="utf-8")
        return manifest
