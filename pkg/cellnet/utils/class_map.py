# cellnet/utils/class_map.py

HEP2_CLASSES = [
    "Homogeneous",
    "Speckled",
    "Nucleolar",
    "Centromere",
    "Nuclear Membrane",
    "Golgi",
]

SPECKLE_SPLIT_CLASSES = [
    "Homogeneous",
    "Coarse Speckled",
    "Nucleolar",
    "Centromere",
    "Fine Speckled",
    "Cytoplasmic",
]

CLASS_TABLES = {
    "hep2": HEP2_CLASSES,
    "speckle_split": SPECKLE_SPLIT_CLASSES,
}

# Spellings found in annotation sheets
LABEL_ALIASES = {
    "HOMOGENEOUS": "Homogeneous",
    "SPECKLED": "Speckled",
    "NUCLEOLAR": "Nucleolar",
    "CENTROMERE": "Centromere",
    "NUCMEMBRANE": "Nuclear Membrane", "NUCLEAR MEMBRANE": "Nuclear Membrane",
    "NUCLEAR_MEMBRANE": "Nuclear Membrane",
    "GOLGI": "Golgi",
    "COARSE_SPECKLED": "Coarse Speckled", "COARSE SPECKLED": "Coarse Speckled",
    "FINE_SPECKLED": "Fine Speckled", "FINE SPECKLED": "Fine Speckled",
    "CYTOPLASMATIC": "Cytoplasmic", "CYTOPLASMIC": "Cytoplasmic",
}


def class_table(name):
    """Return a named class table (hep2 / speckle_split) or None"""
    return CLASS_TABLES.get(str(name).strip().lower())


def canonical_label(label):
    """Map an annotation spelling to its class name; unknown spellings pass through stripped"""
    key = str(label).strip()
    return LABEL_ALIASES.get(key.upper(), key)
