from django.apps import AppConfig


class SimkitConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'Simkit'
