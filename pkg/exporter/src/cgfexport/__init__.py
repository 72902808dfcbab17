from cgfexport.export import (
    ENCODER_DIMS,
    ExportJob,
    build_encoder,
    build_preprocess,
    export,
    write_cgf,
)

__all__ = ["ENCODER_DIMS", "ExportJob", "build_encoder", "build_preprocess",
           "export", "write_cgf"]
