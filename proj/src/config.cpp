namespace psvma {}
