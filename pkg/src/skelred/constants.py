"""Physical constants and the element table (SI units, kmol basis)."""

GAS_CONSTANT = 8314.46261815324  # J/(kmol K)
ONE_ATM = 101325.0  # Pa
REFERENCE_PRESSURE = ONE_ATM  # standard state for equilibrium constants

# Atomic weights, kg/kmol.
ATOMIC_WEIGHTS = {
    "H": 1.008,
    "D": 2.014,
    "HE": 4.002602,
    "LI": 6.94,
    "B": 10.81,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "F": 18.998403163,
    "NE": 20.1797,
    "NA": 22.98976928,
    "MG": 24.305,
    "AL": 26.9815385,
    "SI": 28.085,
    "P": 30.973761998,
    "S": 32.06,
    "CL": 35.45,
    "AR": 39.95,
    "K": 39.0983,
    "CA": 40.078,
    "FE": 55.845,
    "KR": 83.798,
    "XE": 131.293,
}
