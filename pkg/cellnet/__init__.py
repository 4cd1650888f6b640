'''cellnet: a from-scratch convolutional network engine for HEp-2 staining-pattern classification.'''

__version__ = '0.1.0'
