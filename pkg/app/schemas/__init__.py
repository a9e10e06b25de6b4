# Pydantic models shared by every pipeline stage
