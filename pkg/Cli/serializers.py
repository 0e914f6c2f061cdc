import logging

from rest_framework import serializers

from Simkit.utils import (
    AXIS_P,
    AXIS_SNR,
    CSI_MODES,
    SCHEMES,
    SHIFT_MODES,
    EXPLICIT_SHIFTS,
    ArraySetup,
    ContaminationSetup,
    DownlinkSetup,
    ExperimentConfig,
    Numerology,
    PilotSetup,
    PlanSetup,
    RunSetup,
    SweepSetup,
    UserSetup,
    ValidationSetup,
)

logger = logging.getLogger(__name__)

# f_s = 1/(3 T_s) must hold to this relative accuracy when both are given
NUMEROLOGY_TOLERANCE = 1e-3
MAX_SEED = 2 ** 64 - 1


class BandField(serializers.ListField):
    child = serializers.FloatField()

    def __init__(self, **kwargs):
        super().__init__(min_length=2, max_length=2, **kwargs)

    def to_internal_value(self, data):
        lo, hi = super().to_internal_value(data)
        if not (-0.5 <= lo < hi <= 0.5):
            raise serializers.ValidationError(f"band must satisfy -1/2 <= lo < hi <= 1/2, got [{lo}, {hi}]")
        return (lo, hi)


class NumerologySerializer(serializers.Serializer):
    sampling_hz = serializers.FloatField(default=5000.0)
    symbol_duration = serializers.FloatField(default=66.67e-6, allow_null=True)

    def validate_sampling_hz(self, value):
        if value <= 0:
            raise serializers.ValidationError("sampling frequency must be positive")
        return value

    def validate(self, data):
        duration = data.get("symbol_duration")
        if duration is not None:
            if duration <= 0:
                raise serializers.ValidationError({"symbol_duration": "symbol duration must be positive"})
            expected = 1.0 / (3.0 * duration)
            if abs(data["sampling_hz"] - expected) > NUMEROLOGY_TOLERANCE * expected:
                logger.warning(
                    "Sampling frequency %.6g Hz differs from 1/(3 T_s) = %.6g Hz; using the sampling frequency",
                    data["sampling_hz"], expected,
                )
        return data

    def create(self, validated_data):
        return Numerology(**validated_data)


class ArraySerializer(serializers.Serializer):
    M = serializers.IntegerField(default=16, min_value=1)

    def create(self, validated_data):
        return ArraySetup(**validated_data)


class UserSerializer(serializers.Serializer):
    doppler_hz = serializers.FloatField()
    power_db = serializers.FloatField(default=0.0)
    shift = serializers.FloatField(default=None, allow_null=True)

    def validate_doppler_hz(self, value):
        if value <= 0:
            raise serializers.ValidationError("Doppler frequency must be positive")
        return value

    def create(self, validated_data):
        return UserSetup(**validated_data)


class ContaminationSerializer(serializers.Serializer):
    enabled = serializers.BooleanField(default=True)
    band = BandField(default=(-0.375, 0.375))
    inr_db = serializers.FloatField(default=0.0)

    def create(self, validated_data):
        return ContaminationSetup(**validated_data)


class PilotSerializer(serializers.Serializer):
    schemes = serializers.ListField(child=serializers.ChoiceField(choices=SCHEMES), default=list(SCHEMES), min_length=1)
    shift_mode = serializers.ChoiceField(choices=SHIFT_MODES, default=SHIFT_MODES[0])
    offset = serializers.FloatField(default=0.375)
    spacing = serializers.FloatField(default=1.0 / 36.0)
    snr_db = serializers.FloatField(default=0.0)

    def create(self, validated_data):
        validated_data["schemes"] = tuple(validated_data["schemes"])
        return PilotSetup(**validated_data)


class DownlinkSerializer(serializers.Serializer):
    lag = serializers.IntegerField(default=1, min_value=0)
    snr_db = serializers.FloatField(default=None, allow_null=True)
    csi = serializers.ChoiceField(choices=CSI_MODES, default=CSI_MODES[0])

    def create(self, validated_data):
        return DownlinkSetup(**validated_data)


class SweepSerializer(serializers.Serializer):
    axis = serializers.ChoiceField(choices=(AXIS_P, AXIS_SNR), default=AXIS_P)
    values = serializers.ListField(child=serializers.FloatField(), default=[512, 1024, 2048, 4096], allow_empty=True)

    def validate(self, data):
        if data["axis"] == AXIS_P:
            for value in data["values"]:
                if value != int(value) or value < 2:
                    raise serializers.ValidationError({"values": f"P values must be integers >= 2, got {value}"})
        return data

    def create(self, validated_data):
        validated_data["values"] = tuple(validated_data["values"])
        return SweepSetup(**validated_data)


class RunSerializer(serializers.Serializer):
    P = serializers.IntegerField(default=4096, min_value=2)
    trials = serializers.IntegerField(default=200, min_value=1)
    seed = serializers.IntegerField(default=20240601, min_value=0, max_value=MAX_SEED)

    def create(self, validated_data):
        return RunSetup(**validated_data)


class PlanSerializer(serializers.Serializer):
    guard_bins = serializers.FloatField(default=0.0, min_value=0.0)
    integer = serializers.BooleanField(default=False)
    forbidden = serializers.ListField(child=BandField(), default=list)

    def create(self, validated_data):
        validated_data["forbidden"] = tuple(tuple(band) for band in validated_data["forbidden"])
        return PlanSetup(**validated_data)


class ValidationSerializer(serializers.Serializer):
    trials = serializers.IntegerField(default=200, min_value=2)
    P = serializers.IntegerField(default=4096, min_value=8)
    M = serializers.IntegerField(default=16, min_value=1)
    draws = serializers.IntegerField(default=500, min_value=2)
    convergence_P = serializers.ListField(
        child=serializers.IntegerField(min_value=2), default=[512, 1024, 2048, 4096], min_length=1,
    )
    run_monte_carlo = serializers.BooleanField(default=True)

    def create(self, validated_data):
        validated_data["convergence_P"] = tuple(validated_data["convergence_P"])
        return ValidationSetup(**validated_data)


SECTIONS = {
    "numerology": NumerologySerializer,
    "array": ArraySerializer,
    "contamination": ContaminationSerializer,
    "pilots": PilotSerializer,
    "downlink": DownlinkSerializer,
    "sweep": SweepSerializer,
    "run": RunSerializer,
    "plan": PlanSerializer,
    "validation": ValidationSerializer,
}


class ExperimentConfigSerializer(serializers.Serializer):
    """
    The whole experiment file. Every section is optional and falls back to the
    shipped defaults; `users` is required.
    """
    numerology = NumerologySerializer(required=False)
    array = ArraySerializer(required=False)
    users = UserSerializer(many=True, allow_empty=False)
    contamination = ContaminationSerializer(required=False)
    pilots = PilotSerializer(required=False)
    downlink = DownlinkSerializer(required=False)
    sweep = SweepSerializer(required=False)
    run = RunSerializer(required=False)
    plan = PlanSerializer(required=False)
    validation = ValidationSerializer(required=False)

    def validate(self, data):
        # absent sections still need their defaults filled in
        for name, serializer in SECTIONS.items():
            if name not in data:
                section = serializer(data={})
                section.is_valid(raise_exception=True)
                data[name] = section.validated_data
        samplingHz = data["numerology"]["sampling_hz"]
        errors = []
        for k, user in enumerate(data["users"]):
            F = user["doppler_hz"] / samplingHz
            if F > 0.5:
                errors.append(f"user {k}: normalized Doppler {F:.4g} exceeds 1/2")
        if errors:
            raise serializers.ValidationError({"users": errors})
        if data["pilots"]["shift_mode"] == EXPLICIT_SHIFTS:
            missing = [k for k, user in enumerate(data["users"]) if user.get("shift") is None]
            if missing:
                raise serializers.ValidationError({"users": [f"explicit shift mode needs a shift for users {missing}"]})
        return data

    def create(self, validated_data):
        sections = {name: serializer().create(dict(validated_data[name])) for name, serializer in SECTIONS.items()}
        users = tuple(UserSerializer().create(dict(user)) for user in validated_data["users"])
        return ExperimentConfig(users=users, **sections)
