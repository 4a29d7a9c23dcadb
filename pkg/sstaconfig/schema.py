import graphene

import token_alignment.schema


class Query(token_alignment.schema.Query, graphene.ObjectType):
    pass


schema = graphene.Schema(query=Query)
