import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'pilot_alignment.settings')
django.setup()
