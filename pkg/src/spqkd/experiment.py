"""Measured parameters of the reference free-space NV-centre BB84 link.

Everything downstream defaults to these values. Rates are per second,
durations in ns unless the name says otherwise.
"""

PULSE_RATE_HZ = 5.3e6
PULSE_PERIOD_NS = 187.5
LIFETIME_NS = 23.0

MU = 0.014
SUPPRESSION_C = 0.07

T_EOM = 0.65
APD_EFFICIENCY = 0.6
# detected by the two control APDs at the sender
ALICE_DETECTED_RATE = 7.0e4
# detected by the receiver, before time gating
BOB_DETECTED_RATE = 3.93e4

DARK_RATES_HZ = {"H": 150.0, "V": 180.0, "L": 380.0, "R": 160.0}
GATE_SPP_NS = 50.0
GATE_WCP_NS = 2.0

POL_ERROR_HV = 0.012
POL_ERROR_LR = 0.032

MEASURED_QBER = 0.046
MEASURED_QBER_UNCERTAINTY = 0.01

# operating point quoted alongside the secure-gain evaluation
P_EXP = 7.4e-3
S_M_QUOTED = 1.9e-6

F_SHANNON = 1.0
F_BEST_KNOWN = 1.16
F_BEST_KNOWN_MAX_QBER = 0.05

# HBT characterisation run
HBT_RATE_PER_DETECTOR = 3.5e4
HBT_DURATION_S = 166.0

SLOTS_PER_ACQUISITION = 53_000  # 10 ms at 5.3 MHz

# receiver optics (beam splitter, wave plate, PBS) between the free-space
# channel and the APDs, inferred from the detected rate at the receiver
RECEIVER_TRANSMISSION = BOB_DETECTED_RATE / (MU * PULSE_RATE_HZ * APD_EFFICIENCY)
