# BiFAMP Tests
