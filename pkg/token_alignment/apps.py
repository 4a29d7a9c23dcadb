from django.apps import AppConfig


class TokenAlignmentConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "token_alignment"
