from pastakit.backends.base import DecoderBackend, Feed, StepOutput, StepRequest, ThreadRequest
from pastakit.backends.scripted import ScriptedBackend, split_scripts

__all__ = ["DecoderBackend", "Feed", "ScriptedBackend", "StepOutput", "StepRequest", "ThreadRequest",
           "split_scripts"]
