"""Audio-prompted open-vocabulary object detection at desk scale.

Modules: ``datamodel`` (types and manifests), ``synthdata`` (tone-speech
corpus), ``encoders``, ``alignment`` (stage-1 losses), ``grounding``
(detection head, stage-2 losses, inference), ``trainer``, ``evalkit`` and
``cli``.
"""

__version__ = "0.1.0"
