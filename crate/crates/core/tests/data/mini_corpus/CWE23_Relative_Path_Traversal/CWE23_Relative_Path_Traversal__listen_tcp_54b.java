package testcases.CWE23_Relative_Path_Traversal;

import testcasesupport.*;

public class CWE23_Relative_Path_Traversal__listen_tcp_54b extends AbstractTestCase
{
    public void badSink(String data) throws Throwable
    {
        IO.writeLine(data);
    }

    public void good() throws Throwable
    {
    }
}
