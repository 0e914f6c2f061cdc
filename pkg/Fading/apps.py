from django.apps import AppConfig


class FadingConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'Fading'
