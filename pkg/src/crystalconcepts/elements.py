"""Element tables for the first 100 elements.

Symbols, Pauling electronegativities, common oxidation states and the
soft-sphere radii used by the toy stability oracle and the synthetic
template builder.
"""

import math

SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I "
    "Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt "
    "Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm"
).split()

assert len(SYMBOLS) == 100

Z_OF = {sym: z for z, sym in enumerate(SYMBOLS, start=1)}

_nan = math.nan

# Pauling scale; noble gases without a tabulated value are nan.
ELECTRONEGATIVITY = (
    2.20, _nan, 0.98, 1.57, 2.04, 2.55, 3.04, 3.44, 3.98, _nan,
    0.93, 1.31, 1.61, 1.90, 2.19, 2.58, 3.16, _nan, 0.82, 1.00,
    1.36, 1.54, 1.63, 1.66, 1.55, 1.83, 1.88, 1.91, 1.90, 1.65,
    1.81, 2.01, 2.18, 2.55, 2.96, 3.00, 0.82, 0.95, 1.22, 1.33,
    1.60, 2.16, 1.90, 2.20, 2.28, 2.20, 1.93, 1.69, 1.78, 1.96,
    2.05, 2.10, 2.66, 2.60, 0.79, 0.89, 1.10, 1.12, 1.13, 1.14,
    1.13, 1.17, 1.20, 1.20, 1.10, 1.22, 1.23, 1.24, 1.25, 1.10,
    1.27, 1.30, 1.50, 2.36, 1.90, 2.20, 2.20, 2.28, 2.54, 2.00,
    1.62, 2.33, 2.02, 2.00, 2.20, 2.20, 0.70, 0.90, 1.10, 1.30,
    1.50, 1.38, 1.36, 1.28, 1.13, 1.28, 1.30, 1.30, 1.30, 1.30,
)

OXIDATION_STATES = {
    "H": (-1, 1), "He": (), "Li": (1,), "Be": (2,), "B": (3,), "C": (-4, 4),
    "N": (-3, 3, 5), "O": (-2,), "F": (-1,), "Ne": (), "Na": (1,), "Mg": (2,),
    "Al": (3,), "Si": (-4, 4), "P": (-3, 3, 5), "S": (-2, 2, 4, 6),
    "Cl": (-1, 1, 3, 5, 7), "Ar": (), "K": (1,), "Ca": (2,), "Sc": (3,),
    "Ti": (2, 3, 4), "V": (2, 3, 4, 5), "Cr": (2, 3, 6), "Mn": (2, 3, 4, 7),
    "Fe": (2, 3), "Co": (2, 3), "Ni": (2, 3), "Cu": (1, 2), "Zn": (2,),
    "Ga": (3,), "Ge": (-4, 2, 4), "As": (-3, 3, 5), "Se": (-2, 2, 4, 6),
    "Br": (-1, 1, 3, 5), "Kr": (2,), "Rb": (1,), "Sr": (2,), "Y": (3,),
    "Zr": (4,), "Nb": (3, 5), "Mo": (4, 6), "Tc": (4, 7), "Ru": (3, 4),
    "Rh": (3,), "Pd": (2, 4), "Ag": (1,), "Cd": (2,), "In": (3,),
    "Sn": (-4, 2, 4), "Sb": (-3, 3, 5), "Te": (-2, 2, 4, 6),
    "I": (-1, 1, 3, 5, 7), "Xe": (2, 4, 6), "Cs": (1,), "Ba": (2,), "La": (3,),
    "Ce": (3, 4), "Pr": (3,), "Nd": (3,), "Pm": (3,), "Sm": (2, 3),
    "Eu": (2, 3), "Gd": (3,), "Tb": (3, 4), "Dy": (3,), "Ho": (3,), "Er": (3,),
    "Tm": (3,), "Yb": (2, 3), "Lu": (3,), "Hf": (4,), "Ta": (5,), "W": (4, 6),
    "Re": (4, 7), "Os": (4,), "Ir": (3, 4), "Pt": (2, 4), "Au": (1, 3),
    "Hg": (1, 2), "Tl": (1, 3), "Pb": (2, 4), "Bi": (3,), "Po": (-2, 2, 4),
    "At": (-1, 1), "Rn": (2,), "Fr": (1,), "Ra": (2,), "Ac": (3,), "Th": (4,),
    "Pa": (5,), "U": (3, 4, 5, 6), "Np": (5,), "Pu": (3, 4), "Am": (3,),
    "Cm": (3,), "Bk": (3,), "Cf": (3,), "Es": (3,), "Fm": (3,),
}

NONMETALS = frozenset(
    "H He B C N O F Ne Si P S Cl Ar Ge As Se Br Kr Sb Te I Xe At Rn".split()
)

# Shannon-like ionic radii (Å) in the element's most common oxidation state.
_RADII = {
    "H": 0.35, "Li": 0.76, "Be": 0.45, "B": 0.27, "C": 0.70, "N": 1.46,
    "O": 1.40, "F": 1.33, "Na": 1.02, "Mg": 0.72, "Al": 0.54, "Si": 0.40,
    "P": 0.44, "S": 1.84, "Cl": 1.81, "K": 1.38, "Ca": 1.00, "Sc": 0.75,
    "Ti": 0.61, "V": 0.54, "Cr": 0.62, "Mn": 0.83, "Fe": 0.65, "Co": 0.65,
    "Ni": 0.69, "Cu": 0.73, "Zn": 0.74, "Ga": 0.62, "Ge": 0.53, "As": 0.46,
    "Se": 1.98, "Br": 1.96, "Rb": 1.52, "Sr": 1.18, "Y": 0.90, "Zr": 0.72,
    "Nb": 0.64, "Mo": 0.59, "Ru": 0.62, "Rh": 0.67, "Pd": 0.86, "Ag": 1.15,
    "Cd": 0.95, "In": 0.80, "Sn": 0.69, "Sb": 0.76, "Te": 2.21, "I": 2.20,
    "Cs": 1.67, "Ba": 1.35, "La": 1.03, "Hf": 0.71, "Ta": 0.64, "W": 0.60,
    "Pt": 0.63, "Au": 0.85, "Hg": 1.02, "Tl": 1.50, "Pb": 1.19, "Bi": 1.03,
}
DEFAULT_RADIUS = 1.0


def symbol(z):
    return SYMBOLS[int(z) - 1]


def atomic_number(sym):
    return Z_OF[sym]


def electronegativity(z):
    return ELECTRONEGATIVITY[int(z) - 1]


def oxidation_states(z):
    return OXIDATION_STATES[symbol(z)]


def is_metal(z):
    return symbol(z) not in NONMETALS


def radius(z):
    return _RADII.get(symbol(z), DEFAULT_RADIUS)
