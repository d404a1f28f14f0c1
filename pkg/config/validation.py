"""
Shared serializer base for every JSON document the pipeline reads.
"""
from rest_framework import serializers


class StrictSerializer(serializers.Serializer):
    """Serializer that rejects keys it does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['unknown key'] for key in unknown})
        return super().to_internal_value(data)


def flatten_errors(detail, prefix=''):
    """Turn nested DRF error details into ``section.key: message`` text."""
    messages = []
    if isinstance(detail, dict):
        for key, value in detail.items():
            name = key if key != 'non_field_errors' else ''
            path = '.'.join(part for part in (prefix, str(name)) if part)
            messages.extend(flatten_errors(value, path).split('; '))
    elif isinstance(detail, (list, tuple)):
        for index, value in enumerate(detail):
            if isinstance(value, (dict, list, tuple)):
                messages.extend(flatten_errors(value, f'{prefix}[{index}]').split('; '))
            else:
                messages.append(f'{prefix}: {value}' if prefix else str(value))
    else:
        messages.append(f'{prefix}: {detail}' if prefix else str(detail))
    return '; '.join(m for m in messages if m)
