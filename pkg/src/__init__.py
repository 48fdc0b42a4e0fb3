# Make src a package so absolute imports work in all environments
