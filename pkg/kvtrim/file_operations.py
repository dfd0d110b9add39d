import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import aiofiles
from pydantic import BaseModel

from kvtrim.analysis import (
    EnergySpectrum,
    HeadAnalysis,
    channel_profile_csv,
    energy_csv,
    magnitude_csv,
)
from kvtrim.tensor import Matrix

logger = logging.getLogger(__name__)

Artifact = Union[str, bytes]


class TaskResult(BaseModel):
    status: str
    message: Optional[str]
    payload: List[str]


def ensure_output_dir(output_directory: str) -> Path:
    out_path = Path(output_directory).expanduser()
    if not out_path.exists() or out_path.is_file():
        out_path.mkdir(parents=True, exist_ok=True)
    return out_path


async def write_artifact(path: Path, content: Artifact) -> None:
    mode = "wb" if isinstance(content, bytes) else "w"
    # newline="" keeps "\n" on every platform so artifacts compare byte for byte
    kwargs = {} if isinstance(content, bytes) else {"newline": ""}
    async with aiofiles.open(path, mode=mode, **kwargs) as file_out:
        await file_out.write(content)


async def write_artifacts(output_directory: str, artifacts: Dict[str, Artifact]) -> TaskResult:
    """
    Write every named artifact into ``output_directory``, in the order given.
    """
    result = TaskResult(status="failed", message=None, payload=[])
    try:
        out_path = ensure_output_dir(output_directory)
        for file_name, content in artifacts.items():
            file_path = Path(out_path, file_name)
            await write_artifact(file_path, content)
            logger.debug("Wrote %s", file_path)
            result.payload.append(str(file_path))
        result.status = "success"
    except OSError as e:
        result.message = str(e)
    return result


async def write_energy_csv(path: Path, spectrum: EnergySpectrum) -> None:
    await write_artifact(path, energy_csv(spectrum))


async def write_magnitude_csv(path: Path, cache: Matrix) -> None:
    await write_artifact(path, magnitude_csv(cache))


async def write_channel_profile_csv(path: Path, keys: Matrix, values: Matrix) -> None:
    await write_artifact(path, channel_profile_csv(keys, values))


async def write_head_analyses(
    output_directory: str, analyses: List[HeadAnalysis], summary_name: str
) -> TaskResult:
    """
    Write the energy spectrum, both magnitude maps and the channel profile of every head.
    The first head's spectrum is copied to ``summary_name``.
    """
    result = TaskResult(status="failed", message=None, payload=[])
    try:
        out_path = ensure_output_dir(output_directory)
        if analyses:
            summary = Path(out_path, summary_name)
            await write_energy_csv(summary, analyses[0].spectrum)
            result.payload.append(str(summary))
        for analysis in analyses:
            suffix = analysis.suffix
            written = [
                Path(out_path, f"energy_{suffix}"),
                Path(out_path, f"keys_{suffix}"),
                Path(out_path, f"values_{suffix}"),
                Path(out_path, f"channels_{suffix}"),
            ]
            await write_energy_csv(written[0], analysis.spectrum)
            await write_magnitude_csv(written[1], analysis.keys)
            await write_magnitude_csv(written[2], analysis.values)
            await write_channel_profile_csv(written[3], analysis.keys, analysis.values)
            result.payload.extend(str(path) for path in written)
        result.status = "success"
    except OSError as e:
        result.message = str(e)
    return result
