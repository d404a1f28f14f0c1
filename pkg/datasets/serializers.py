from rest_framework import serializers

from config.validation import StrictSerializer


class SubmapRecordSerializer(StrictSerializer):
    """One manifest line: a submap with its sequence, time stamp, cloud file and pose."""

    id = serializers.CharField(max_length=200)
    sequence = serializers.CharField(max_length=200)
    timestamp = serializers.FloatField()
    pcd = serializers.CharField(max_length=1000)
    pose = serializers.ListField(
        child=serializers.FloatField(),
        min_length=7,
        max_length=7,
        help_text='tx ty tz qx qy qz qw',
    )

    def validate_pose(self, value):
        qx, qy, qz, qw = value[3:]
        if qx * qx + qy * qy + qz * qz + qw * qw == 0:
            raise serializers.ValidationError('quaternion must be non-zero')
        return value
