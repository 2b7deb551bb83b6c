import dataclasses
import json
from datetime import datetime
from enum import Enum
from json import JSONEncoder
from typing import Any

import torch


class CustomJSONEncoder(JSONEncoder):
    def default(self, o: Any) -> Any:
        if isinstance(o, Enum):
            return o.value

        if isinstance(o, datetime):
            return o.isoformat()

        if isinstance(o, torch.Tensor):
            return o.tolist()

        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)

        return super().default(o)


def json_dumps(obj: Any, sort_keys: bool = False) -> str:
    return json.dumps(obj, cls=CustomJSONEncoder, sort_keys=sort_keys)
