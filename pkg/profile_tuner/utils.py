import hashlib
import json
import re
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Optional

from pydantic import BaseModel

from profile_tuner.errors import FormatError

logger = logging.getLogger(__name__)


def canonical_json(payload: Any) -> str:
    """Serialize with sorted keys and no insignificant whitespace (hash input)."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(text: str, length: int = 16) -> str:
    """Short sha256 hex digest of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def derive_seed(seed: int, *purpose: Any) -> int:
    """
    Derive an independent 32-bit seed for one purpose from the global seed.
    
    Every random choice in the package goes through here, e.g.
    derive_seed(seed, "sample", step) or derive_seed(seed, "split", "OPE"),
    so changing one consumer never shifts another's stream.
    """
    material = "|".join([str(seed), *(str(p) for p in purpose)])
    return int.from_bytes(hashlib.sha256(material.encode("utf-8")).digest()[:4], "big")


def is_gemma_model(model_name: str) -> bool:
    """Check if model is a Gemma variant (doesn't support system role)"""
    return "gemma" in model_name.lower() and "flash" not in model_name.lower()


def transform_messages_for_gemma(messages: list) -> list:
    """
    Transform messages for Gemma models, which don't support system role.
    
    Converts system role messages to user messages with "Instructions:" prefix.
    
    Args:
        messages: List of message dictionaries with role and content
        
    Returns:
        Transformed messages list compatible with Gemma
    """
    if not messages:
        return messages
    
    transformed = []
    system_instructions = []
    
    for msg in messages:
        if msg.get("role") == "system":
            system_instructions.append(msg.get("content", ""))
        else:
            transformed.append(dict(msg))
    
    # Prepend system instructions to the first user message
    if system_instructions:
        instructions_text = "\n".join(system_instructions)
        
        for msg in transformed:
            if msg.get("role") == "user":
                msg["content"] = f"Instructions:\n{instructions_text}\n\n{msg['content']}"
                break
        else:
            transformed.insert(0, {
                "role": "user",
                "content": f"Instructions:\n{instructions_text}"
            })
    
    return transformed


def extract_json_from_response(response_content: Optional[str]) -> Dict[str, Any]:
    """
    Extract and parse JSON from LLM response content.
    
    Handles multiple formats:
    1. Direct JSON string
    2. JSON wrapped in markdown code blocks (```json ... ```)
    3. JSON object embedded in surrounding prose
    
    Raises:
        ValueError: If JSON cannot be extracted or parsed
    """
    if response_content is None:
        raise ValueError("Response content is None")
    
    try:
        return json.loads(response_content)
    except json.JSONDecodeError:
        logger.debug("Direct JSON parsing failed, attempting markdown extraction")
    
    patterns = [
        r'```json\s*\n(.*?)\n```',  # ```json ... ```
        r'```\s*\n(.*?)\n```',       # ``` ... ```
        r'```json\s*(.*?)```',       # ```json...``` (no newlines)
        r'```\s*(.*?)```',           # ```...``` (no newlines)
        r'(\{.*\})',                 # bare object inside prose
    ]
    
    for pattern in patterns:
        match = re.search(pattern, response_content, re.DOTALL)
        if match:
            json_str = match.group(1).strip()
            try:
                return json.loads(json_str)
            except json.JSONDecodeError:
                logger.debug(f"Failed to parse JSON from pattern: {pattern}")
                continue
    
    raise ValueError(
        f"Failed to extract JSON from response. "
        f"Content preview: {response_content[:200]}..."
    )


def extract_sentinel_blocks(text: Optional[str], open_marker: str, close_marker: str) -> list[str]:
    """Return the stripped, non-empty contents of every open...close block in text."""
    if not text:
        return []
    pattern = re.escape(open_marker) + r"(.*?)" + re.escape(close_marker)
    return [block.strip() for block in re.findall(pattern, text, re.DOTALL) if block.strip()]


def estimate_tokens(text: str) -> int:
    """Rough token count (about four characters per token for English text)."""
    return (len(text) + 3) // 4


def read_jsonl(path: str | Path) -> Iterator[tuple[int, Dict[str, Any]]]:
    """
    Yield (line_number, record) for each non-blank line of a JSON-lines file.
    
    Raises:
        FormatError: a line is not valid JSON (carries the line number)
    """
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield line_number, json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"invalid JSON: {e.msg}", line_number) from e


def write_jsonl(path: str | Path, records: Iterable[BaseModel | Dict[str, Any]], append: bool = False) -> None:
    """Write pydantic models or dicts as JSON lines (UTF-8, one record per line)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            if isinstance(record, BaseModel):
                f.write(record.model_dump_json())
            else:
                f.write(json.dumps(record, ensure_ascii=False))
            f.write("\n")


def write_json(path: str | Path, payload: BaseModel | Any) -> None:
    """Write a model or plain payload as indented JSON; byte-stable for equal inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


def load_json(json_file: str | Path, default: Any = None) -> Any:
    """
    Load a JSON file, or return `default` if it doesn't exist.
    """
    json_file = Path(json_file)
    if not json_file.exists():
        return default
    
    with open(json_file, 'r', encoding='utf-8') as f:
        return json.load(f)
